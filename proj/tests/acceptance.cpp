// Acceptance checks: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tplens/baseline.hpp"
#include "tplens/error.hpp"
#include "tplens/instrument.hpp"
#include "tplens/lens.hpp"
#include "tplens/steer.hpp"
#include "tplens/tokenizer.hpp"
#include "tplens/tp_runtime.hpp"
#include "tplens/weights_io.hpp"

using namespace tplens;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Model toy(std::size_t d, std::size_t layers, std::uint64_t seed) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = 4;
  c.d_ff = default_ff_width(d);
  c.vocab_size = 258;
  c.max_seq = 512;
  return init_random(c, seed);
}

const std::string kPrompt = "The logit lens reads";

// ---------------------------------------------------------------------------

Outcome memory_formula() {
  const auto e1 = memory_elements(1500, 8192, 80, 1);
  const double gb1 = static_cast<double>(memory_bytes(e1, Precision::kBF16)) / 1e9;
  const double gb3 =
      static_cast<double>(memory_bytes(memory_elements(1500, 8192, 80, 3), Precision::kBF16)) / 1e9;
  const bool ok = e1 == 983'040'000ull && std::abs(gb1 / 1.966 - 1.0) <= 0.005 &&
                  std::abs(gb3 / 5.9 - 1.0) <= 0.005;
  return {ok, fmt("elements=%llu bf16=%.4f GB x3=%.4f GB",
                  static_cast<unsigned long long>(e1), gb1, gb3)};
}

Outcome logit_lens_identity() {
  const auto t0 = Clock::now();
  const Model m = toy(64, 8, 2024);
  const auto prompt = encode_bytes(kPrompt);
  const std::size_t T = 64, deepest = 7;
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = {{deepest}, {ActivationType::kBlockOut}, true};
  const Trace trace = run_trace(dec, prompt, T, opts);
  const Tensor Z =
      project_trajectory(trace.store.get_trajectory(deepest, ActivationType::kBlockOut), m);

  // Live logits from an independent cached run over the realized sequence.
  KvCache cache(m.config);
  std::vector<float> live;
  for (TokenId t : prompt) live = forward_step(m, cache, t);
  float worst = 0.0f;
  std::size_t top1_match = 0;
  for (std::size_t s = 0; s < T; ++s) {
    worst = std::max(worst, max_abs_diff(Z.row(s), live));
    if (static_cast<TokenId>(argmax(Z.row(s))) == trace.generated[s]) ++top1_match;
    if (s + 1 < T) live = forward_step(m, cache, trace.generated[s]);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4f && top1_match == T && secs < 10.0,
          fmt("max|diff|=%.3g top1 %zu/%zu in %.2fs", worst, top1_match, T, secs)};
}

Outcome deferred_vs_eager() {
  const auto t0 = Clock::now();
  const Model m = toy(64, 8, 2024);
  const auto prompt = encode_bytes(kPrompt);
  const std::size_t T = 64;
  const CaptureConfig cap = CaptureConfig::all(m.config);
  DenseDecoder dec(m);
  EagerProjector eager(m, cap);
  LayerHook* extra[] = {&eager};
  TraceOptions opts;
  opts.capture = cap;
  const Trace trace = run_trace(dec, prompt, T, opts, extra);
  const std::size_t skip = prompt.size() - 1;
  std::size_t rows = 0, mismatched = 0;
  for (std::size_t layer : cap.layers) {
    for (ActivationType type : cap.types) {
      const Tensor deferred = project_trajectory(trace.store.get_trajectory(layer, type), m);
      const Tensor live = eager.logits(layer, type);
      for (std::size_t s = 0; s < T; ++s) {
        const auto a = deferred.row(s), b = live.row(skip + s);
        ++rows;
        if (!std::equal(a.begin(), a.end(), b.begin())) ++mismatched;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {mismatched == 0 && secs < 10.0,
          fmt("%zu/%zu rows bitwise equal in %.2fs", rows - mismatched, rows, secs)};
}

Outcome schedule_only_baseline() {
  const Model m = toy(64, 8, 2024);
  const auto prompt = encode_bytes(kPrompt);
  const std::size_t T = 32;
  const CaptureConfig cap = CaptureConfig::all(m.config);
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = cap;
  const Trace trace = run_trace(dec, prompt, T, opts);
  const LensReport ours = build_report(trace, m, {5});
  const auto cached = greedy_decode(dec, prompt, T);
  const auto base = baseline_lens_generate(m, prompt, T, {cap.layers, cap.types, 5, false});

  bool ids_equal = base.tokens == trace.generated;
  float worst = 0.0f;
  for (std::size_t li = 0; li < ours.layers.size(); ++li) {
    for (std::size_t ti = 0; ti < ours.layers[li].types.size(); ++ti) {
      const auto& a = ours.layers[li].types[ti].positions;
      const auto& b = base.report.layers[li].types[ti].positions;
      ids_equal = ids_equal && a.size() == b.size();
      for (std::size_t s = 0; ids_equal && s < a.size(); ++s) {
        for (std::size_t j = 0; j < a[s].topk.size(); ++j) {
          ids_equal = ids_equal && a[s].topk[j].id == b[s].topk[j].id;
          worst = std::max(worst, std::abs(a[s].topk[j].p - b[s].topk[j].p));
        }
      }
    }
  }
  const bool counters = base.full_prefix_forwards == T && base.cached_steps == 0 &&
                        cached.decode_steps == T;
  return {ids_equal && worst <= 1e-4f && counters,
          fmt("ids %s, max|dp|=%.3g; baseline %zu full-prefix forwards vs %zu cached "
              "decode steps",
              ids_equal ? "exact" : "differ", worst, base.full_prefix_forwards,
              cached.decode_steps)};
}

Outcome speedup_property() {
  const auto t0 = Clock::now();
  const Model m = toy(128, 12, 77);
  BenchOptions o;
  o.budgets = {32, 64, 128};
  o.repeats = 3;
  o.warmup = 1;
  const auto r = bench_compare(m, encode_bytes(kPrompt), o);
  bool increasing = true;
  for (std::size_t i = 1; i < r.entries.size(); ++i) {
    increasing = increasing && r.entries[i].speedup > r.entries[i - 1].speedup;
  }
  const double at128 = r.entries.back().speedup;
  const double secs = seconds_since(t0);
  return {increasing && at128 >= 5.0 && secs < 300.0,
          fmt("speedup T=32 %.1fx, T=64 %.1fx, T=128 %.1fx (N=3, warm-up excluded) "
              "in %.0fs",
              r.entries[0].speedup, r.entries[1].speedup, r.entries[2].speedup, secs)};
}

Outcome tp_invariance() {
  const auto t0 = Clock::now();
  const Model m = toy(64, 8, 2024);
  const auto prompt = encode_bytes(kPrompt);
  const std::size_t T = 32;
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);

  auto run = [&](Decoder& dec) {
    Trace trace = run_trace(dec, prompt, T, opts);
    std::vector<TokenId> seq = prompt;
    seq.insert(seq.end(), trace.generated.begin(), trace.generated.end());
    dec.reset();
    std::vector<std::vector<float>> logits;
    for (TokenId t : seq) {
      auto l = dec.step(t, {});
      logits.emplace_back(l.begin(), l.end());
    }
    return std::make_pair(std::move(trace), std::move(logits));
  };
  TpEngine one(m, 1);
  const auto [ref, ref_logits] = run(one);
  bool tokens_equal = true;
  float worst_traj = 0.0f, worst_logit = 0.0f;
  for (std::size_t S : {2u, 4u}) {
    TpEngine engine(m, S);
    const auto [t, logits] = run(engine);
    tokens_equal = tokens_equal && t.generated == ref.generated;
    for (const auto& [layer, type] : ref.store.keys()) {
      worst_traj = std::max(worst_traj, max_abs_diff(t.store.get_trajectory(layer, type).data(),
                                                     ref.store.get_trajectory(layer, type).data()));
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
      worst_logit = std::max(worst_logit, max_abs_diff(logits[i], ref_logits[i]));
    }
  }
  const double secs = seconds_since(t0);
  return {tokens_equal && worst_traj <= 1e-5f && worst_logit <= 1e-5f && secs < 60.0,
          fmt("S in {1,2,4}: tokens %s, max|traj diff|=%.3g, max|logit diff|=%.3g in %.2fs",
              tokens_equal ? "identical" : "differ", worst_traj, worst_logit, secs)};
}

Outcome kv_cache_equivalence() {
  const Model m = toy(64, 8, 2024);
  std::mt19937_64 rng(5150);
  std::uniform_int_distribution<int> len(2, 48), byte(0, 255);
  float worst = 0.0f;
  std::size_t positions = 0;
  for (int p = 0; p < 20; ++p) {
    std::vector<TokenId> seq{kBosToken};
    const int n = len(rng);
    for (int i = 1; i < n; ++i) seq.push_back(byte(rng));
    KvCache cache(m.config);
    const FullForward full = forward_full(m, seq);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const auto cached = forward_step(m, cache, seq[t]);
      worst = std::max(worst, max_abs_diff(cached, full.logits.row(t)));
      ++positions;
    }
  }
  return {worst <= 1e-4f,
          fmt("20 prompts, %zu positions, max|diff|=%.3g", positions, worst)};
}

Outcome steering_dose_response() {
  const Model m = toy(64, 8, 2024);
  const std::size_t deepest = m.config.n_layers - 1;
  const TokenId target = 'A';
  const auto vec = unembedding_direction(m, target, deepest);
  std::vector<std::vector<TokenId>> prompts;
  for (const auto& p : synthetic_ab_prompts(12, 31)) prompts.push_back(encode_bytes(p));

  // Monotonicity over +alpha and -alpha at the deepest block output (default
  // relative clip 1.0).
  SweepOptions o;
  o.site = InjectionSite::kBlockOut;
  const std::vector<double> up{0.0, 0.5, 1.0, 1.5}, down{-1.5, -1.0, -0.5, 0.0};
  const auto rise = run_sweep(m, prompts, vec, target, up, o);
  const auto fall = run_sweep(m, prompts, vec, target, down, o);
  std::size_t monotone = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 1; j < up.size(); ++j) {
      ok = ok && rise[i].propensity[j] > rise[i].propensity[j - 1];
      // fall runs -1.5..0, so propensity under -alpha decreases as alpha grows
      ok = ok && fall[i].propensity[j] > fall[i].propensity[j - 1];
    }
    if (ok) ++monotone;
  }

  // OLS machinery against the closed form on the full-grid sweep.
  const auto grid = default_alpha_grid();
  const auto results = run_sweep(m, prompts, vec, target, grid, o);
  double worst_ols = 0.0;
  for (const auto& r : results) {
    const double n = static_cast<double>(r.alphas.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      mx += r.alphas[i] / n;
      my += r.propensity[i] / n;
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      num += (r.alphas[i] - mx) * (r.propensity[i] - my);
      den += (r.alphas[i] - mx) * (r.alphas[i] - mx);
    }
    worst_ols = std::max(worst_ols, std::abs(r.fit.slope - num / den));
  }
  const SteerStats stats = fit_stats(results);
  const SteerStats control = fit_stats(shuffled_control(results, 99));
  const bool ok = monotone == prompts.size() && worst_ols <= 1e-9 &&
                  stats.p_value < 0.05 && std::abs(control.p_value - 1.0) <= 1e-6;
  return {ok, fmt("monotone on %zu/%zu prompts; |OLS - closed form|=%.2g; mean slope "
                  "%.4g, p=%.3g; shuffled control p=%.6f",
                  monotone, prompts.size(), worst_ols, stats.mean_slope, stats.p_value,
                  control.p_value)};
}

Outcome steering_noop_and_cost() {
  const Model m = toy(64, 8, 2024);
  const auto prompt = encode_bytes(kPrompt);
  const std::size_t T = 64;
  DenseDecoder dec(m);
  const auto plain = greedy_decode(dec, prompt, T);
  SteerPlan plan;
  plan.vector = unembedding_direction(m, 'A', m.config.n_layers - 1);
  plan.alpha = 0.0f;
  SteeringHook zero_hook(plan);
  DecodeHooks hooks;
  hooks.interventions.push_back(&zero_hook);
  const auto zero = greedy_decode(dec, prompt, T, hooks);
  const bool noop = zero.tokens == plain.tokens && zero.answer_logits == plain.answer_logits &&
                    zero_hook.applications() > 0;

  SteerPlan active = plan;
  active.alpha = 1.0f;
  const auto steered = steered_generate(dec, prompt, active, T, 'A');
  const bool same_count = steered.forward_calls == plain.forward_calls &&
                          zero.forward_calls == plain.forward_calls;

  // Interleaved repeats; the minimum is the least noisy estimate of cost.
  double best_plain = 1e30, best_steered = 1e30;
  for (int r = 0; r < 9; ++r) {
    auto t0 = Clock::now();
    greedy_decode(dec, prompt, T);
    best_plain = std::min(best_plain, seconds_since(t0));
    t0 = Clock::now();
    steered_generate(dec, prompt, active, T, 'A');
    best_steered = std::min(best_steered, seconds_since(t0));
  }
  const double overhead = best_steered / best_plain - 1.0;
  return {noop && same_count && overhead <= 0.05,
          fmt("alpha=0 %s; forward calls %zu vs %zu; wall-clock overhead %+.2f%%",
              noop ? "bitwise identical" : "DIFFERS", steered.forward_calls,
              plain.forward_calls, 100.0 * overhead)};
}

Outcome serialization() {
  const Model m = toy(64, 8, 2024);
  const auto dir = std::filesystem::temp_directory_path() /
                   ("tplens_accept_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(dir);
  struct Cleanup {
    std::filesystem::path p;
    ~Cleanup() {
      std::error_code ec;
      std::filesystem::remove_all(p, ec);
    }
  } cleanup{dir};

  save_weights(dir / "m.bin", m);
  const Model back = load_weights(dir / "m.bin");
  const bool weights_ok = back.config == m.config &&
                          weights_checksum(back.weights) == weights_checksum(m.weights);

  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  const Trace trace = run_trace(dec, encode_bytes(kPrompt), 16, opts);
  const LensReport report = build_report(trace, m, {5});
  save_report(report, dir / "r.json");
  const LensReport loaded = load_report(dir / "r.json");
  bool report_ok = report_to_json(loaded).dump() == report_to_json(report).dump() &&
                   loaded.record_count() == report.record_count();
  for (std::size_t li = 0; report_ok && li < report.layers.size(); ++li) {
    for (std::size_t ti = 0; ti < 3; ++ti) {
      const auto& a = report.layers[li].types[ti].positions;
      const auto& b = loaded.layers[li].types[ti].positions;
      for (std::size_t s = 0; s < a.size(); ++s) {
        for (std::size_t j = 0; j < a[s].topk.size(); ++j) {
          report_ok = report_ok && a[s].topk[j].id == b[s].topk[j].id &&
                      a[s].topk[j].p == b[s].topk[j].p && a[s].topk[j].text == b[s].topk[j].text;
        }
      }
    }
  }

  // Each mutation must be rejected with a diagnostic naming its JSON path.
  const auto base = nlohmann::json::parse(report_to_json(report).dump());
  struct Case {
    std::function<void(nlohmann::json&)> mutate;
    std::string path;
  };
  const std::vector<Case> cases{
      {[](auto& j) { j.erase("k"); }, "/k"},
      {[](auto& j) { j["layers"][1]["types"][2].erase("positions"); },
       "/layers/1/types/2/positions"},
      {[](auto& j) { j["layers"][0]["types"][0]["positions"][3]["topk"][1]["p"] = "x"; },
       "/layers/0/types/0/positions/3/topk/1/p"},
      {[](auto& j) { j["layers"][2]["layer"] = -1; }, "/layers/2/layer"},
      {[](auto& j) { j["model"]["d_model"] = "64"; }, "/model/d_model"},
  };
  std::size_t rejected = 0;
  for (const auto& c : cases) {
    auto j = base;
    c.mutate(j);
    try {
      report_from_json(j);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kSchema &&
          std::string(e.what()).find(c.path) != std::string::npos) {
        ++rejected;
      }
    }
  }
  return {weights_ok && report_ok && rejected == cases.size(),
          fmt("weights %s, report %s, %zu/%zu schema violations rejected with their path",
              weights_ok ? "round-trip" : "DIFFER", report_ok ? "round-trips" : "DIFFERS",
              rejected, cases.size())};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"memory formula", memory_formula},
      {"logit-lens identity", logit_lens_identity},
      {"deferred vs eager projection", deferred_vs_eager},
      {"schedule-only baseline", schedule_only_baseline},
      {"speedup property", speedup_property},
      {"tensor-parallel invariance", tp_invariance},
      {"KV-cache equivalence", kv_cache_equivalence},
      {"steering dose-response", steering_dose_response},
      {"steering no-op and cost", steering_noop_and_cost},
      {"serialization", serialization},
  };
  int failures = 0;
  int index = 1;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", index++, c.name,
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
