#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tplens/generate.hpp"
#include "tplens/hooks.hpp"
#include "tplens/model.hpp"
#include "tplens/serialize.hpp"
#include "tplens/tensor.hpp"

namespace tplens {

/// Unit-norm steering direction recorded at one layer.
struct SteeringVector {
  std::size_t layer = 0;
  ActivationType type = ActivationType::kAttnOut;  // where it was extracted
  Tensor direction;                                // [d], ||v|| = 1
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

/// v = (target - base) / ||target - base||. Throws ErrorKind::kDegenerate when
/// the two activations coincide.
SteeringVector build_vector(std::span<const float> y_target,
                            std::span<const float> y_base, std::size_t layer,
                            ActivationType type);

/// Checks a multiple-choice prompt ends in a single-token label: at least one
/// token after BOS and a printable, non-space byte at the end.
void check_label_prompt(std::span<const TokenId> prompt);

/// Activation of `type` at `layer` for the final (label) token of `prompt`,
/// taken from one instrumented forward over the prompt.
Tensor extract_label_activation(Decoder& decoder,
                                std::span<const TokenId> prompt,
                                std::size_t layer, ActivationType type);

// Direction of the LM-head row for `token`, normalized; pushes the logit lens
// reading towards that token when added to the residual stream.
SteeringVector unembedding_direction(const Model& model, TokenId token,
                                     std::size_t layer);

enum class InjectionSite { kAttnOut, kBlockOut };
std::string_view injection_site_name(InjectionSite s);
InjectionSite parse_injection_site(std::string_view name);

struct SteerPlan {
  SteeringVector vector;
  float alpha = 0.0f;
  InjectionSite site = InjectionSite::kAttnOut;
  // Relative clip: the added vector's norm is at most clip * ||h||.
  std::optional<float> clip = 1.0f;
  // Per-layer multiplier applied to alpha; missing entries mean 1.
  std::vector<float> layer_scale;

  void validate(const ModelConfig& config) const;
  float effective_alpha() const;
};

/// h' = h + a v with a = alpha * layer scale, clipped to
/// sign(a) * min(|a|, clip * ||h||) when a clip is set.
void inject_into(std::span<float> h, const SteerPlan& plan);
std::vector<float> inject(std::span<const float> h, const SteerPlan& plan);

/// Hook applying a plan inside the forward pass at its layer and site.
class SteeringHook final : public LayerHook {
 public:
  explicit SteeringHook(const SteerPlan& plan);
  void on_activation(const ActivationSite& site, std::span<float> h) override;
  std::size_t applications() const noexcept { return applications_; }

 private:
  const SteerPlan& plan_;
  ActivationType type_;
  std::size_t applications_ = 0;
};

struct SteeredResult {
  std::vector<TokenId> tokens;
  double propensity = 0.0;  // full-softmax probability of the target token
  std::size_t forward_calls = 0;
};

// Probability of `target` under the full softmax of `logits`.
double token_propensity(std::span<const float> logits, TokenId target);

/// Greedy decoding with the plan injected at every step (prompt included).
/// Propensity is read at the answer position, i.e. from the logits that
/// choose the first generated token.
SteeredResult steered_generate(Decoder& decoder,
                               std::span<const TokenId> prompt,
                               const SteerPlan& plan, std::size_t budget,
                               TokenId target);

// ---------------------------------------------------------------------------
// Dose-response statistics

struct LineFit {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
};

/// Ordinary least squares y = intercept + slope * x.
LineFit fit_line(std::span<const double> x, std::span<const double> y);

struct PairedTest {
  double t = 0.0;
  double p_value = 1.0;
  std::size_t df = 0;
};

/// Two-sided paired t-test on (after - before).
PairedTest paired_t_test(std::span<const double> after,
                         std::span<const double> before);

struct SweepResult {
  std::size_t prompt_index = 0;
  std::vector<double> alphas;
  std::vector<double> propensity;
  LineFit fit;
};

struct SteerStats {
  double mean_slope = 0.0;
  double std_slope = 0.0;  // sample standard deviation across prompts
  double mean_r2 = 0.0;
  double t_statistic = 0.0;
  double p_value = 1.0;
  std::size_t n_prompts = 0;
};

inline constexpr double kSaturationBound = 1.5;

// "lo:hi:n" -> n evenly spaced points including both ends.
std::vector<double> parse_alpha_grid(std::string_view spec);
std::vector<double> default_alpha_grid();
void check_alpha_grid(std::span<const double> alphas,
                      double saturation_bound = kSaturationBound);

struct SweepOptions {
  InjectionSite site = InjectionSite::kAttnOut;
  std::optional<float> clip = 1.0f;
  std::vector<float> layer_scale;
  std::size_t budget = 1;
  std::size_t tp = 1;
  std::size_t threads = 0;  // 0 = hardware concurrency
  double saturation_bound = kSaturationBound;
};

/// Propensity of `target` for every (prompt, alpha), with one OLS fit per
/// prompt. Prompts run in parallel, each worker on its own decoder.
std::vector<SweepResult> run_sweep(const Model& model,
                                   const std::vector<std::vector<TokenId>>& prompts,
                                   const SteeringVector& vector, TokenId target,
                                   std::span<const double> alphas,
                                   const SweepOptions& options = {});

/// Mean/std of slopes, mean R^2, and the paired test of the metric at the
/// largest alpha against the smallest. Needs at least two prompts.
SteerStats fit_stats(std::span<const SweepResult> results);

/// Label-permutation null control. Each prompt's propensities are reassigned
/// to a seeded random permutation of the alpha grid, and every permuted series
/// is paired with a copy whose endpoint labels are swapped, so the control is
/// balanced and carries no dose signal.
std::vector<SweepResult> shuffled_control(std::span<const SweepResult> results,
                                          std::uint64_t seed);

nlohmann::ordered_json sweep_to_json(std::span<const SweepResult> results,
                                     const SteerStats& stats);
std::string sweep_to_csv(std::span<const SweepResult> results);

// Binary vector file: magic "TPLNSVEC", u32 version, u32 layer, u32 d,
// u64 metadata length, metadata JSON (includes the type), f32[d] direction.
void save_vector(const SteeringVector& v, const std::filesystem::path& path);
SteeringVector load_vector(const std::filesystem::path& path);

/// Deterministic two-choice prompts ending in "Answer: " for sweeps, and the
/// label-terminated pair used to build a contrastive vector.
std::vector<std::string> synthetic_ab_prompts(std::size_t n, std::uint64_t seed);

}  // namespace tplens
