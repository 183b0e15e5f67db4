#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "tplens/generate.hpp"
#include "tplens/hooks.hpp"
#include "tplens/model.hpp"
#include "tplens/tensor.hpp"

namespace tplens {

/// Which layers (the wrapped set) and which activation types to record.
struct CaptureConfig {
  std::vector<std::size_t> layers;
  std::vector<ActivationType> types;
  bool enabled = true;

  static CaptureConfig all(const ModelConfig& model);
  void validate(const ModelConfig& model) const;
  bool wants(std::size_t layer, ActivationType type) const;
};

// Parses "a..b" (inclusive), "a,b,c", or "all" into layer indices.
std::vector<std::size_t> parse_layer_spec(std::string_view spec,
                                          std::size_t n_layers);

/// Per-(layer, type) append-only trajectories of hidden slices, one d-vector
/// per recorded step.
class ActivationStore {
 public:
  using Key = std::pair<std::size_t, ActivationType>;

  ActivationStore() = default;
  ActivationStore(std::size_t d_model, CaptureConfig config);

  // Copies `h`; `step` must equal the current length for the key.
  void record_slice(std::size_t layer, ActivationType type,
                    std::span<const float> h, std::size_t step);

  Tensor get_trajectory(std::size_t layer, ActivationType type) const;
  std::span<const float> slice(std::size_t layer, ActivationType type,
                               std::size_t step) const;

  bool contains(std::size_t layer, ActivationType type) const;
  std::size_t length(std::size_t layer, ActivationType type) const;
  // Common trajectory length T; throws if trajectories disagree.
  std::size_t length() const;
  std::size_t d_model() const noexcept { return d_model_; }
  std::size_t element_count() const;
  const CaptureConfig& config() const noexcept { return config_; }
  std::vector<Key> keys() const;

  friend bool operator==(const ActivationStore&, const ActivationStore&);

 private:
  std::size_t d_model_ = 0;
  CaptureConfig config_;
  std::map<Key, std::vector<std::vector<float>>> trajectories_;
};

/// Hook that copies observed activations into a store. Step index is the
/// token position minus `origin`.
class ActivationRecorder final : public LayerHook {
 public:
  ActivationRecorder(ActivationStore& store, std::size_t origin)
      : store_(store), origin_(origin) {}

  void on_activation(const ActivationSite& site, std::span<float> h) override;

 private:
  ActivationStore& store_;
  std::size_t origin_;
};

// Captured-activation footprint: T * d * |layers| * |types|.
std::uint64_t memory_elements(std::uint64_t tokens, std::uint64_t d_model,
                              std::uint64_t n_layers_wrapped,
                              std::uint64_t n_types);
std::uint64_t memory_bytes(std::uint64_t elements, Precision precision);

/// Global counters for the allocation audit used by tests: capture-side
/// allocations and vocabulary-sized projection buffers.
namespace audit {

struct Snapshot {
  std::uint64_t capture_allocations = 0;
  std::uint64_t capture_max_elements = 0;
  std::uint64_t vocab_buffers = 0;
  std::uint64_t vocab_buffer_elements = 0;
};

Snapshot snapshot();
void note_capture_allocation(std::size_t elements);
void note_vocab_buffer(std::size_t elements);

}  // namespace audit

/// Output of a traced generation: realized tokens plus captured slices.
struct Trace {
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;
  ActivationStore store;
  bool capture_prefill = false;
  std::size_t tp = 1;
};

struct TraceOptions {
  CaptureConfig capture;
  GenerateOptions generate;
};

/// Greedy generation with the recorder attached as an observer; extra
/// interventions (e.g. steering) fire before recording.
Trace run_trace(Decoder& decoder, std::span<const TokenId> prompt,
                std::size_t budget, const TraceOptions& options,
                std::span<LayerHook* const> interventions = {});

// Raw trajectory dump: trajectories.bin holds T x d little-endian f32 rows per
// (layer, type); trajectories.json indexes them. tokens.json holds the tokens.
void save_trace(const Trace& trace, const std::filesystem::path& dir);
Trace load_trace(const std::filesystem::path& dir);

}  // namespace tplens
