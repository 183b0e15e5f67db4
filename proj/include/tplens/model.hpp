#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tplens/hooks.hpp"
#include "tplens/tensor.hpp"

namespace tplens {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 176;
  std::size_t vocab_size = 258;
  std::size_t max_seq = 1024;
  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// LLaMA-style MLP width: 8d/3 rounded up to a multiple of 8.
std::size_t default_ff_width(std::size_t d_model);

struct LayerWeights {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv;  // [d x d], rows grouped by head
  Tensor wo;          // [d x d]
  Tensor mlp_norm;    // [d]
  Tensor w_gate, w_up;  // [d_ff x d]
  Tensor w_down;        // [d x d_ff]
};

struct Weights {
  Tensor embedding;  // [V x d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [V x d]
  Tensor lm_bias;     // [V]
};

/// Visits every parameter tensor in file order with its canonical name.
void for_each_tensor(Weights& w,
                     const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const Weights& w,
                     const std::function<void(const std::string&,
                                              const Tensor&)>& fn);

// Expected (name, shape) table for a config, in file order.
std::vector<std::pair<std::string, Shape>> weight_shape_table(
    const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

/// Immutable model: config plus weights. Shared read-only across threads.
struct Model {
  ModelConfig config;
  Weights weights;
};

Model init_random(const ModelConfig& config, std::uint64_t seed);
// FNV-1a over the bit patterns of every parameter, in file order.
std::uint64_t weights_checksum(const Weights& w);

void check_token(const ModelConfig& config, TokenId token);

/// Per-layer keys and values for a contiguous block of heads.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head,
          std::size_t max_seq);
  explicit KvCache(const ModelConfig& config)
      : KvCache(config.n_layers, config.n_heads, config.d_head(),
                config.max_seq) {}

  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return max_seq_; }
  std::size_t n_heads() const noexcept { return n_heads_; }
  std::size_t d_head() const noexcept { return d_head_; }

  std::span<float> key(std::size_t layer, std::size_t head, std::size_t pos);
  std::span<const float> key(std::size_t layer, std::size_t head,
                             std::size_t pos) const;
  std::span<float> value(std::size_t layer, std::size_t head, std::size_t pos);
  std::span<const float> value(std::size_t layer, std::size_t head,
                               std::size_t pos) const;

  // Commits the position written by the current step on every layer.
  void advance();
  void reset() noexcept { length_ = 0; }

 private:
  std::size_t offset(std::size_t layer, std::size_t head,
                     std::size_t pos) const;

  std::size_t n_layers_ = 0, n_heads_ = 0, d_head_ = 0, max_seq_ = 0;
  std::size_t length_ = 0;
  std::vector<float> keys_, values_;
};

// Rotary embedding on consecutive (even, odd) pairs of each head.
void apply_rope(std::span<float> heads, std::size_t n_heads,
                std::size_t d_head, std::size_t pos, float theta);

// Causal attention of one query (n_heads x d_head, concatenated) against
// cached positions [0, len) of `layer`. Writes concatenated head outputs.
void attend_cached(std::span<const float> q, const KvCache& cache,
                   std::size_t layer, std::size_t len, std::span<float> out);

/// Scratch buffers for one cached forward step; reused across steps.
struct StepWorkspace {
  explicit StepWorkspace(const ModelConfig& c);
  std::vector<float> x, xn, q, k, v, attn, attn_out, gate, up, mlp_out,
      logits;
};

/// One KV-cached step of the dense single-device model. Appends the token's
/// keys/values to `cache`, fires `hooks` at attn_out, mlp_out and block_out of
/// every layer, and returns next-token logits (a view into `ws.logits`).
std::span<const float> forward_step(const Model& model, KvCache& cache,
                                    TokenId token, HookList hooks,
                                    StepWorkspace& ws);
std::vector<float> forward_step(const Model& model, KvCache& cache,
                                TokenId token, HookList hooks = {});

// Final norm + LM head for one hidden row: W_out * RMSNorm(h) + b.
void project_hidden(const Model& model, std::span<const float> h,
                    std::span<float> normed_scratch, std::span<float> logits);

/// Result of an uncached forward over a whole sequence.
struct FullForward {
  Tensor logits;  // [n x V], or [1 x V] for the last position only
  // activations[layer][type] is [n x d]; empty unless requested.
  std::vector<std::array<Tensor, 3>> activations;
};

struct FullForwardOptions {
  bool keep_activations = false;
  bool last_logits_only = false;
};

/// Reference forward without a cache: full causal attention over the prefix.
FullForward forward_full(const Model& model, std::span<const TokenId> tokens,
                         const FullForwardOptions& options = {});

}  // namespace tplens
