#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tplens/hooks.hpp"
#include "tplens/lens.hpp"
#include "tplens/model.hpp"
#include "tplens/serialize.hpp"

namespace tplens {

/// Re-forwarding logit lens: no KV cache, every probed activation projected
/// through the full vocabulary at every step.
struct BaselineConfig {
  std::vector<std::size_t> layers;
  std::vector<ActivationType> types;
  std::size_t k = 5;
  // Harsher schedule: one full-prefix forward per (step, probed layer)
  // instead of one per step.
  bool reforward_per_layer = false;
};

struct BaselineResult {
  std::vector<TokenId> tokens;
  LensReport report;
  std::size_t full_prefix_forwards = 0;
  std::size_t cached_steps = 0;  // always zero; the baseline never caches
  std::size_t vocab_projections = 0;
  std::size_t peak_projection_elements = 0;
};

BaselineResult baseline_lens_generate(const Model& model,
                                      std::span<const TokenId> prompt,
                                      std::size_t budget,
                                      const BaselineConfig& config);

struct TimingStats {
  double mean_s = 0.0;
  double std_s = 0.0;  // sample standard deviation over the timed runs
  double tok_s = 0.0;
  std::vector<double> runs_s;
};

struct BenchEntry {
  std::size_t tokens = 0;
  TimingStats baseline;
  TimingStats ours;
  double speedup = 0.0;  // baseline mean / ours mean
};

struct BenchOptions {
  std::vector<std::size_t> budgets{100, 300, 500};
  std::size_t repeats = 3;
  std::size_t warmup = 1;  // untimed runs of each system before timing
  std::size_t k = 5;
  std::vector<std::size_t> layers;  // empty = all layers
  std::vector<ActivationType> types{kAllActivationTypes.begin(),
                                    kAllActivationTypes.end()};
  std::size_t tp = 1;
};

struct BenchReport {
  ModelConfig model;
  std::vector<TokenId> prompt;
  std::size_t repeats = 0;
  std::vector<BenchEntry> entries;
  nlohmann::ordered_json host;
};

TimingStats summarize_runs(std::vector<double> runs_s, std::size_t tokens);

/// Times the single-pass pipeline (cached traced generation plus deferred
/// report) against the re-forwarding baseline for each budget. Model loading
/// is outside the timed region; warm-up runs are discarded.
BenchReport bench_compare(const Model& model, std::span<const TokenId> prompt,
                          const BenchOptions& options);

nlohmann::ordered_json host_metadata();
nlohmann::ordered_json bench_to_json(const BenchReport& report);
std::string bench_to_csv(const BenchReport& report);

}  // namespace tplens
