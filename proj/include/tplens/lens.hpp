#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tplens/hooks.hpp"
#include "tplens/instrument.hpp"
#include "tplens/model.hpp"
#include "tplens/serialize.hpp"
#include "tplens/tensor.hpp"

namespace tplens {

class TpEngine;

inline constexpr int kLensSchemaVersion = 1;

struct TopKEntry {
  TokenId id = 0;
  std::string text;
  float p = 0.0f;  // probability conditional on the top-k set
};

struct LensPosition {
  std::size_t t = 0;  // generation step
  std::vector<TopKEntry> topk;
};

struct LensTypeBlock {
  ActivationType type = ActivationType::kBlockOut;
  std::vector<LensPosition> positions;
};

struct LensLayerBlock {
  std::size_t layer = 0;
  std::vector<LensTypeBlock> types;
};

/// Logit-lens output indexed layer -> activation type -> position.
struct LensReport {
  int schema_version = kLensSchemaVersion;
  ModelConfig model;
  std::string weights_checksum;
  std::vector<TokenId> prompt_tokens;
  std::vector<TokenId> generated_tokens;
  std::size_t k = 0;
  std::vector<LensLayerBlock> layers;

  std::size_t record_count() const;
  const LensPosition& at(std::size_t layer, ActivationType type,
                         std::size_t t) const;
};

/// Final norm + LM head over every row of a [T x d] trajectory, as one batch:
/// row t = W_out * RMSNorm(H[t]) + b.
Tensor project_trajectory(const Tensor& H, const Model& model);
// Same, with the LM-head matmul split over the engine's vocab shards.
Tensor project_trajectory(const Tensor& H, TpEngine& engine);
// One row at a time; identical arithmetic to the batched path.
std::vector<float> project_row(std::span<const float> h, const Model& model);

/// Top-k logits renormalized by a softmax over just those k values.
std::vector<TopKEntry> top_k_probs(std::span<const float> logits,
                                   std::size_t k, std::size_t vocab_size);

struct ReportOptions {
  std::size_t k = 5;
  // When set, projection runs sharded over this engine's vocab slices.
  TpEngine* engine = nullptr;
};

LensReport build_report(const Trace& trace, const Model& model,
                        const ReportOptions& options);

nlohmann::ordered_json report_to_json(const LensReport& report);
// Rejects schema violations with ErrorKind::kSchema naming the JSON path.
LensReport report_from_json(const nlohmann::json& j);
void save_report(const LensReport& report, const std::filesystem::path& path);
LensReport load_report(const std::filesystem::path& path);

struct HeatmapOptions {
  std::vector<ActivationType> types;  // empty = every type in the report
  std::optional<std::size_t> layer_lo, layer_hi;  // inclusive bounds
};

// Five fill shades, lightest first; bucket = floor(5 * p_top1) clamped to 4.
inline constexpr const char* kHeatmapPalette[5] = {
    "#eff3ff", "#bdd7e7", "#6baed6", "#3182bd", "#08519c"};
std::size_t heatmap_bucket(float top1_probability);

/// Layer x (type, position) grid; each cell lists its top-k token strings.
std::string heatmap_svg(const LensReport& report,
                        const HeatmapOptions& options = {});

/// Observer that projects each slice at the step it is produced; used to
/// check that deferring the projection changes nothing.
class EagerProjector final : public LayerHook {
 public:
  EagerProjector(const Model& model, CaptureConfig capture);
  void on_activation(const ActivationSite& site, std::span<float> h) override;
  // Logits rows in step order for one (layer, type).
  Tensor logits(std::size_t layer, ActivationType type) const;

 private:
  const Model& model_;
  CaptureConfig capture_;
  std::map<std::pair<std::size_t, ActivationType>, std::vector<float>> rows_;
};

}  // namespace tplens
