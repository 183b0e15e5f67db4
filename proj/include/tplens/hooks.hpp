#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace tplens {

// The three capture locations inside a wrapped block.
enum class ActivationType { kAttnOut = 0, kMlpOut = 1, kBlockOut = 2 };

inline constexpr std::array<ActivationType, 3> kAllActivationTypes = {
    ActivationType::kAttnOut, ActivationType::kMlpOut,
    ActivationType::kBlockOut};

std::string_view activation_type_name(ActivationType t);
// Accepts "attn_out"/"attn", "mlp_out"/"mlp", "block_out"/"block".
ActivationType parse_activation_type(std::string_view name);
// Comma-separated list, duplicates rejected, result in canonical order.
std::vector<ActivationType> parse_activation_types(std::string_view list);

struct ActivationSite {
  std::size_t layer;
  ActivationType type;
  std::size_t position;  // absolute sequence position of the token
};

/// Callback fired inside a transformer block with the full (post all-reduce)
/// activation for the current token. Hooks may rewrite `h` in place; the
/// rewritten value is what flows on through the residual stream.
class LayerHook {
 public:
  virtual ~LayerHook() = default;
  virtual void on_activation(const ActivationSite& site,
                             std::span<float> h) = 0;
};

using HookList = std::span<LayerHook* const>;

inline void fire_hooks(HookList hooks, const ActivationSite& site,
                       std::span<float> h) {
  for (LayerHook* hook : hooks) hook->on_activation(site, h);
}

}  // namespace tplens
