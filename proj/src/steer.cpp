#include "tplens/steer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "tplens/error.hpp"
#include "tplens/instrument.hpp"
#include "tplens/tokenizer.hpp"
#include "tplens/tp_runtime.hpp"

namespace tplens {

SteeringVector build_vector(std::span<const float> y_target,
                            std::span<const float> y_base, std::size_t layer,
                            ActivationType type) {
  require(y_target.size() == y_base.size() && !y_target.empty(),
          ErrorKind::kShapeMismatch, "steering inputs differ in length");
  std::vector<double> diff(y_target.size());
  double norm2 = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = static_cast<double>(y_target[i]) - y_base[i];
    norm2 += diff[i] * diff[i];
  }
  const double norm = std::sqrt(norm2);
  require(norm > 0.0 && std::isfinite(norm), ErrorKind::kDegenerate,
          "degenerate steering direction: target and base activations coincide");
  std::vector<float> v(diff.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(diff[i] / norm);
  SteeringVector out;
  out.layer = layer;
  out.type = type;
  out.direction = Tensor::from_vector(std::move(v));
  return out;
}

void check_label_prompt(std::span<const TokenId> prompt) {
  require(prompt.size() >= 2, ErrorKind::kInvalidArgument,
          "prompt has no tokens after BOS");
  const TokenId label = prompt.back();
  require(label > 0x20 && label < 0x7f, ErrorKind::kInvalidArgument,
          "prompt does not end in a single-token label (last token " +
              std::to_string(label) + ")");
}

Tensor extract_label_activation(Decoder& decoder,
                                std::span<const TokenId> prompt,
                                std::size_t layer, ActivationType type) {
  check_label_prompt(prompt);
  TraceOptions options;
  options.capture.layers = {layer};
  options.capture.types = {type};
  const Trace trace = run_trace(decoder, prompt, 1, options);
  auto s = trace.store.slice(layer, type, 0);
  return Tensor::from_vector(std::vector<float>(s.begin(), s.end()));
}

SteeringVector unembedding_direction(const Model& model, TokenId token,
                                     std::size_t layer) {
  check_token(model.config, token);
  require(layer < model.config.n_layers, ErrorKind::kInvalidArgument,
          "layer out of range");
  const auto row = model.weights.lm_head.row(static_cast<std::size_t>(token));
  const std::vector<float> zero(row.size(), 0.0f);
  SteeringVector v = build_vector(row, zero, layer, ActivationType::kBlockOut);
  v.metadata["source"] = "unembedding";
  v.metadata["token"] = token;
  return v;
}

std::string_view injection_site_name(InjectionSite s) {
  return s == InjectionSite::kAttnOut ? "attn_out" : "block_out";
}

InjectionSite parse_injection_site(std::string_view name) {
  if (name == "attn_out" || name == "attn") return InjectionSite::kAttnOut;
  if (name == "block_out" || name == "block") return InjectionSite::kBlockOut;
  fail(ErrorKind::kInvalidArgument,
       "unknown injection site '" + std::string(name) + "'");
}

void SteerPlan::validate(const ModelConfig& config) const {
  require(vector.layer < config.n_layers, ErrorKind::kInvalidArgument,
          "steering layer " + std::to_string(vector.layer) + " out of range");
  require(vector.direction.size() == config.d_model, ErrorKind::kShapeMismatch,
          "steering vector length " + std::to_string(vector.direction.size()) +
              " != d_model " + std::to_string(config.d_model));
  require(!clip || *clip > 0.0f, ErrorKind::kInvalidArgument,
          "clip limit must be positive");
  require(std::isfinite(alpha), ErrorKind::kInvalidArgument,
          "alpha must be finite");
}

float SteerPlan::effective_alpha() const {
  const float scale =
      vector.layer < layer_scale.size() ? layer_scale[vector.layer] : 1.0f;
  return alpha * scale;
}

void inject_into(std::span<float> h, const SteerPlan& plan) {
  const auto v = plan.vector.direction.data();
  require(h.size() == v.size(), ErrorKind::kShapeMismatch,
          "injection dimension mismatch");
  float a = plan.effective_alpha();
  if (a == 0.0f) return;
  if (plan.clip) {
    const float limit = *plan.clip * l2_norm(h);
    a = std::copysign(std::min(std::fabs(a), limit), a);
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += a * v[i];
}

std::vector<float> inject(std::span<const float> h, const SteerPlan& plan) {
  std::vector<float> out(h.begin(), h.end());
  inject_into(out, plan);
  return out;
}

SteeringHook::SteeringHook(const SteerPlan& plan)
    : plan_(plan),
      type_(plan.site == InjectionSite::kAttnOut ? ActivationType::kAttnOut
                                                 : ActivationType::kBlockOut) {}

void SteeringHook::on_activation(const ActivationSite& site,
                                 std::span<float> h) {
  if (site.layer != plan_.vector.layer || site.type != type_) return;
  inject_into(h, plan_);
  ++applications_;
}

double token_propensity(std::span<const float> logits, TokenId target) {
  require(target >= 0 && static_cast<std::size_t>(target) < logits.size(),
          ErrorKind::kInvalidArgument, "target token outside vocabulary");
  const float mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (float z : logits) total += std::exp(static_cast<double>(z) - mx);
  return std::exp(static_cast<double>(logits[static_cast<std::size_t>(target)]) - mx) /
         total;
}

SteeredResult steered_generate(Decoder& decoder,
                               std::span<const TokenId> prompt,
                               const SteerPlan& plan, std::size_t budget,
                               TokenId target) {
  plan.validate(decoder.model().config);
  require(budget >= 1, ErrorKind::kInvalidArgument,
          "steered generation needs a budget of at least one token");
  SteeringHook hook(plan);
  DecodeHooks hooks;
  hooks.interventions.push_back(&hook);
  auto result = greedy_decode(decoder, prompt, budget, hooks);
  SteeredResult out;
  out.propensity = token_propensity(result.answer_logits, target);
  out.tokens = std::move(result.tokens);
  out.forward_calls = result.forward_calls;
  return out;
}

// ---------------------------------------------------------------------------

LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::kInvalidArgument,
          "line fit needs at least two paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, ErrorKind::kDegenerate, "line fit: all x values equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.intercept + f.slope * x[i]);
    ss_res += r * r;
  }
  // Constant y is fitted exactly by the flat line.
  f.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

PairedTest paired_t_test(std::span<const double> after,
                         std::span<const double> before) {
  require(after.size() == before.size(), ErrorKind::kInvalidArgument,
          "paired test: sample sizes differ");
  require(after.size() >= 2, ErrorKind::kInvalidArgument,
          "paired test needs at least two prompts");
  const std::size_t n = after.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = after[i] - before[i];
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  PairedTest out;
  out.df = n - 1;
  if (sd == 0.0) {
    out.t = mean == 0.0 ? 0.0 : std::copysign(INFINITY, mean);
    out.p_value = mean == 0.0 ? 1.0 : 0.0;
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t_distribution<double> dist(static_cast<double>(out.df));
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(out.t)));
  out.p_value = std::clamp(out.p_value, 0.0, 1.0);
  return out;
}

std::vector<double> parse_alpha_grid(std::string_view spec) {
  auto number = [&](std::string_view s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && p == s.data() + s.size() && !s.empty(),
            ErrorKind::kInvalidArgument, "bad alpha grid '" + std::string(spec) + "'");
    return v;
  };
  const auto c1 = spec.find(':');
  const auto c2 = c1 == std::string_view::npos ? c1 : spec.find(':', c1 + 1);
  require(c2 != std::string_view::npos, ErrorKind::kInvalidArgument,
          "alpha grid must be lo:hi:n, got '" + std::string(spec) + "'");
  const double lo = number(spec.substr(0, c1));
  const double hi = number(spec.substr(c1 + 1, c2 - c1 - 1));
  const double count = number(spec.substr(c2 + 1));
  require(count >= 1 && count == std::floor(count), ErrorKind::kInvalidArgument,
          "alpha grid point count must be a positive integer");
  const auto n = static_cast<std::size_t>(count);
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) {
    grid[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return grid;
}

std::vector<double> default_alpha_grid() { return parse_alpha_grid("-1.5:1.5:7"); }

void check_alpha_grid(std::span<const double> alphas, double saturation_bound) {
  require(alphas.size() >= 3, ErrorKind::kInvalidArgument,
          "alpha grid needs at least 3 points, got " + std::to_string(alphas.size()));
  require(std::is_sorted(alphas.begin(), alphas.end()) &&
              std::adjacent_find(alphas.begin(), alphas.end()) == alphas.end(),
          ErrorKind::kInvalidArgument, "alpha grid must be strictly increasing");
  for (double a : alphas) {
    require(std::fabs(a) <= saturation_bound + 1e-12, ErrorKind::kInvalidArgument,
            "alpha " + std::to_string(a) + " beyond saturation bound " +
                std::to_string(saturation_bound));
  }
}

std::vector<SweepResult> run_sweep(const Model& model,
                                   const std::vector<std::vector<TokenId>>& prompts,
                                   const SteeringVector& vector, TokenId target,
                                   std::span<const double> alphas,
                                   const SweepOptions& options) {
  check_alpha_grid(alphas, options.saturation_bound);
  require(!prompts.empty(), ErrorKind::kInvalidArgument, "sweep needs prompts");
  check_token(model.config, target);

  std::vector<SweepResult> results(prompts.size());
  std::size_t workers = options.threads ? options.threads
                                        : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, prompts.size());

  auto run_range = [&](std::size_t w) {
    std::unique_ptr<Decoder> decoder;
    if (options.tp > 1) {
      decoder = std::make_unique<TpEngine>(model, options.tp, ExecMode::kSequential);
    } else {
      decoder = std::make_unique<DenseDecoder>(model);
    }
    for (std::size_t i = w; i < prompts.size(); i += workers) {
      SweepResult r;
      r.prompt_index = i;
      r.alphas.assign(alphas.begin(), alphas.end());
      for (double a : alphas) {
        SteerPlan plan{vector, static_cast<float>(a), options.site, options.clip,
                       options.layer_scale};
        r.propensity.push_back(
            steered_generate(*decoder, prompts[i], plan, options.budget, target).propensity);
      }
      r.fit = fit_line(r.alphas, r.propensity);
      results[i] = std::move(r);
    }
  };

  if (workers <= 1) {
    run_range(0);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run_range(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return results;
}

SteerStats fit_stats(std::span<const SweepResult> results) {
  require(results.size() >= 2, ErrorKind::kInvalidArgument,
          "steering statistics need at least two prompts");
  SteerStats s;
  s.n_prompts = results.size();
  std::vector<double> lo, hi;
  for (const auto& r : results) {
    require(r.alphas.size() >= 3 && r.alphas.size() == r.propensity.size(),
            ErrorKind::kInvalidArgument, "sweep result needs >= 3 alpha points");
    s.mean_slope += r.fit.slope;
    s.mean_r2 += r.fit.r2;
    const auto [mn, mx] = std::minmax_element(r.alphas.begin(), r.alphas.end());
    lo.push_back(r.propensity[static_cast<std::size_t>(mn - r.alphas.begin())]);
    hi.push_back(r.propensity[static_cast<std::size_t>(mx - r.alphas.begin())]);
  }
  const double n = static_cast<double>(results.size());
  s.mean_slope /= n;
  s.mean_r2 /= n;
  double ss = 0.0;
  for (const auto& r : results) ss += (r.fit.slope - s.mean_slope) * (r.fit.slope - s.mean_slope);
  s.std_slope = std::sqrt(ss / (n - 1.0));
  const auto test = paired_t_test(hi, lo);
  s.t_statistic = test.t;
  s.p_value = test.p_value;
  return s;
}

std::vector<SweepResult> shuffled_control(std::span<const SweepResult> results,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SweepResult> out;
  for (const auto& r : results) {
    SweepResult shuffled = r;
    std::shuffle(shuffled.propensity.begin(), shuffled.propensity.end(), rng);
    shuffled.fit = fit_line(shuffled.alphas, shuffled.propensity);
    SweepResult mirrored = shuffled;
    std::swap(mirrored.propensity.front(), mirrored.propensity.back());
    mirrored.fit = fit_line(mirrored.alphas, mirrored.propensity);
    out.push_back(std::move(shuffled));
    out.push_back(std::move(mirrored));
  }
  return out;
}

nlohmann::ordered_json sweep_to_json(std::span<const SweepResult> results,
                                     const SteerStats& stats) {
  OrderedJson j;
  OrderedJson prompts = OrderedJson::array();
  for (const auto& r : results) {
    prompts.push_back({{"prompt", r.prompt_index},
                       {"alphas", r.alphas},
                       {"propensity", r.propensity},
                       {"slope", r.fit.slope},
                       {"intercept", r.fit.intercept},
                       {"r2", r.fit.r2}});
  }
  j["prompts"] = std::move(prompts);
  j["stats"] = {{"mean_slope", stats.mean_slope},
                {"std_slope", stats.std_slope},
                {"mean_r2", stats.mean_r2},
                {"t_statistic", std::isfinite(stats.t_statistic)
                                    ? OrderedJson(stats.t_statistic)
                                    : OrderedJson(nullptr)},
                {"p_value", stats.p_value},
                {"n_prompts", stats.n_prompts}};
  return j;
}

std::string sweep_to_csv(std::span<const SweepResult> results) {
  std::ostringstream os;
  os.precision(17);
  os << "prompt,alpha,propensity,slope,intercept,r2\n";
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      os << r.prompt_index << ',' << r.alphas[i] << ',' << r.propensity[i] << ','
         << r.fit.slope << ',' << r.fit.intercept << ',' << r.fit.r2 << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kVectorMagic = "TPLNSVEC";
constexpr std::uint32_t kVectorVersion = 1;

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_vector(const SteeringVector& v, const std::filesystem::path& path) {
  OrderedJson meta = v.metadata;
  meta["type"] = activation_type_name(v.type);
  const std::string text = meta.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  os.write(kVectorMagic.data(), static_cast<std::streamsize>(kVectorMagic.size()));
  put_le(os, kVectorVersion, 4);
  put_le(os, v.layer, 4);
  put_le(os, v.direction.size(), 4);
  put_le(os, text.size(), 8);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_f32_le(os, v.direction.data());
  os.flush();
  require(bool(os), ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

SteeringVector load_vector(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::kIo, "cannot open steering vector '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  constexpr std::size_t prefix = 8 + 4 + 4 + 4 + 8;
  require(bytes.size() >= prefix, ErrorKind::kFormat, "steering vector header truncated");
  require(std::memcmp(p, kVectorMagic.data(), kVectorMagic.size()) == 0, ErrorKind::kFormat,
          "bad magic number in '" + path.string() + "'");
  require(get_le(p + 8, 4) == kVectorVersion, ErrorKind::kFormat,
          "unsupported steering vector version");
  SteeringVector v;
  v.layer = get_le(p + 12, 4);
  const std::size_t d = get_le(p + 16, 4);
  const std::size_t meta_len = get_le(p + 20, 8);
  require(bytes.size() == prefix + meta_len + d * 4, ErrorKind::kFormat,
          "steering vector file size does not match its header");
  try {
    v.metadata = OrderedJson::parse(bytes.substr(prefix, meta_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("steering vector metadata: ") + e.what());
  }
  require(v.metadata.is_object() && v.metadata.contains("type") && v.metadata["type"].is_string(),
          ErrorKind::kFormat, "steering vector metadata lacks a type");
  v.type = parse_activation_type(v.metadata["type"].get<std::string>());
  v.metadata.erase("type");
  v.direction = Tensor(Shape{d});
  read_f32_le(bytes.data() + prefix + meta_len, v.direction.data());
  check_finite(v.direction.data(), "steering vector");
  return v;
}

std::vector<std::string> synthetic_ab_prompts(std::size_t n, std::uint64_t seed) {
  static constexpr const char* kSubjects[] = {
      "the report", "your goal", "the plan", "this change", "the request",
      "the answer", "my advice", "the rule", "the update", "the schedule"};
  static constexpr const char* kVerbs[] = {"be revised", "be accepted", "be paused",
                                           "be shared", "be corrected", "be kept"};
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    const char* s = kSubjects[rng() % std::size(kSubjects)];
    const char* v = kVerbs[rng() % std::size(kVerbs)];
    out.push_back("Q" + std::to_string(i) + ": Should " + s + " " + v +
                  "?\n(A) Yes\n(B) No\nAnswer: ");
  }
  return out;
}

}  // namespace tplens
