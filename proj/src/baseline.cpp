#include "tplens/baseline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <numeric>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "tplens/error.hpp"
#include "tplens/instrument.hpp"
#include "tplens/tp_runtime.hpp"

namespace tplens {

BaselineResult baseline_lens_generate(const Model& model,
                                      std::span<const TokenId> prompt,
                                      std::size_t budget,
                                      const BaselineConfig& config) {
  const auto& c = model.config;
  require(!prompt.empty(), ErrorKind::kInvalidArgument,
          "prompt must contain at least one token");
  require(prompt.size() + budget <= c.max_seq, ErrorKind::kInvalidArgument,
          "prompt + budget exceeds context limit");
  require(config.k >= 1, ErrorKind::kInvalidArgument, "top-k must be >= 1");
  CaptureConfig probe{config.layers, config.types, true};
  probe.validate(c);

  BaselineResult out;
  LensReport& report = out.report;
  report.model = c;
  {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(weights_checksum(model.weights)));
    report.weights_checksum = buf;
  }
  report.prompt_tokens.assign(prompt.begin(), prompt.end());
  report.k = config.k;
  for (std::size_t layer : config.layers) {
    LensLayerBlock lb{layer, {}};
    for (ActivationType type : config.types) lb.types.push_back({type, {}});
    report.layers.push_back(std::move(lb));
  }

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  const FullForwardOptions opts{true, true};
  for (std::size_t step = 0; step < budget; ++step) {
    FullForward pass;
    const std::size_t passes = config.reforward_per_layer ? config.layers.size() : 1;
    for (std::size_t p = 0; p < passes; ++p) {
      pass = forward_full(model, seq, opts);
      ++out.full_prefix_forwards;
    }
    const std::size_t last = seq.size() - 1;
    for (auto& lb : report.layers) {
      for (auto& tb : lb.types) {
        auto h = pass.activations[lb.layer][static_cast<int>(tb.type)].row(last);
        const auto logits = project_row(h, model);
        ++out.vocab_projections;
        out.peak_projection_elements = std::max(out.peak_projection_elements, logits.size());
        tb.positions.push_back({step, top_k_probs(logits, config.k, c.vocab_size)});
      }
    }
    const auto next = static_cast<TokenId>(argmax(pass.logits.row(0)));
    out.tokens.push_back(next);
    seq.push_back(next);
  }
  report.generated_tokens = out.tokens;
  return out;
}

TimingStats summarize_runs(std::vector<double> runs_s, std::size_t tokens) {
  TimingStats s;
  s.runs_s = std::move(runs_s);
  const double n = static_cast<double>(s.runs_s.size());
  if (s.runs_s.empty()) return s;
  s.mean_s = std::accumulate(s.runs_s.begin(), s.runs_s.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : s.runs_s) ss += (r - s.mean_s) * (r - s.mean_s);
  s.std_s = s.runs_s.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  s.tok_s = s.mean_s > 0.0 ? static_cast<double>(tokens) / s.mean_s : 0.0;
  return s;
}

BenchReport bench_compare(const Model& model, std::span<const TokenId> prompt,
                          const BenchOptions& options) {
  require(options.repeats >= 3, ErrorKind::kInvalidArgument,
          "benchmark needs at least 3 timed repeats");
  require(!options.budgets.empty(), ErrorKind::kInvalidArgument,
          "benchmark needs at least one budget");
  std::vector<std::size_t> layers = options.layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
  }

  BenchReport report;
  report.model = model.config;
  report.prompt.assign(prompt.begin(), prompt.end());
  report.repeats = options.repeats;
  report.host = host_metadata();

  TraceOptions trace_opts;
  trace_opts.capture = {layers, options.types, true};
  BaselineConfig base_cfg{layers, options.types, options.k, false};

  std::unique_ptr<Decoder> decoder;
  std::unique_ptr<TpEngine> engine;
  if (options.tp > 1) {
    engine = std::make_unique<TpEngine>(model, options.tp);
  } else {
    decoder = std::make_unique<DenseDecoder>(model);
  }
  Decoder& dec = engine ? static_cast<Decoder&>(*engine) : *decoder;

  using Clock = std::chrono::steady_clock;
  auto ours_once = [&](std::size_t T) {
    const auto t0 = Clock::now();
    Trace trace = run_trace(dec, prompt, T, trace_opts);
    LensReport r = build_report(trace, model, {options.k, engine.get()});
    const auto t1 = Clock::now();
    (void)r;
    return std::chrono::duration<double>(t1 - t0).count();
  };
  auto baseline_once = [&](std::size_t T) {
    const auto t0 = Clock::now();
    auto r = baseline_lens_generate(model, prompt, T, base_cfg);
    const auto t1 = Clock::now();
    (void)r;
    return std::chrono::duration<double>(t1 - t0).count();
  };

  for (std::size_t T : options.budgets) {
    require(T >= 1, ErrorKind::kInvalidArgument, "budgets must be >= 1");
    for (std::size_t w = 0; w < options.warmup; ++w) {
      ours_once(T);
      baseline_once(T);
    }
    std::vector<double> ours, base;
    for (std::size_t r = 0; r < options.repeats; ++r) {
      ours.push_back(ours_once(T));
      base.push_back(baseline_once(T));
    }
    BenchEntry e;
    e.tokens = T;
    e.ours = summarize_runs(std::move(ours), T);
    e.baseline = summarize_runs(std::move(base), T);
    e.speedup = e.ours.mean_s > 0.0 ? e.baseline.mean_s / e.ours.mean_s : 0.0;
    report.entries.push_back(std::move(e));
  }
  return report;
}

nlohmann::ordered_json host_metadata() {
  OrderedJson h;
  char name[256] = {};
  if (gethostname(name, sizeof name - 1) != 0) name[0] = '\0';
  h["hostname"] = name;
  h["hardware_threads"] = std::thread::hardware_concurrency();
#if defined(__clang__)
  h["compiler"] = "clang " __clang_version__;
#elif defined(__GNUC__)
  h["compiler"] = "gcc " __VERSION__;
#else
  h["compiler"] = "unknown";
#endif
#ifdef NDEBUG
  h["build"] = "release";
#else
  h["build"] = "debug";
#endif
  const std::time_t now = std::time(nullptr);
  char ts[32];
  std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  h["timestamp"] = ts;
  return h;
}

namespace {

OrderedJson timing_json(const TimingStats& s) {
  return {{"mean_s", s.mean_s}, {"std_s", s.std_s}, {"tok_s", s.tok_s},
          {"runs_s", s.runs_s}};
}

}  // namespace

nlohmann::ordered_json bench_to_json(const BenchReport& report) {
  OrderedJson j;
  j["model"] = config_to_json(report.model);
  j["prompt_tokens"] = report.prompt;
  j["repeats"] = report.repeats;
  OrderedJson budgets = OrderedJson::array();
  for (const auto& e : report.entries) {
    budgets.push_back({{"T", e.tokens},
                       {"baseline", timing_json(e.baseline)},
                       {"ours", timing_json(e.ours)},
                       {"speedup", e.speedup}});
  }
  j["budgets"] = std::move(budgets);
  j["host"] = report.host;
  return j;
}

std::string bench_to_csv(const BenchReport& report) {
  std::ostringstream os;
  os.precision(9);
  os << "T,baseline_mean_s,baseline_std_s,baseline_tok_s,ours_mean_s,ours_std_s,"
        "ours_tok_s,speedup\n";
  for (const auto& e : report.entries) {
    os << e.tokens << ',' << e.baseline.mean_s << ',' << e.baseline.std_s << ','
       << e.baseline.tok_s << ',' << e.ours.mean_s << ',' << e.ours.std_s << ','
       << e.ours.tok_s << ',' << e.speedup << '\n';
  }
  return os.str();
}

}  // namespace tplens
