#include "tplens/tplens.h"

#include <algorithm>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "tplens/baseline.hpp"
#include "tplens/error.hpp"
#include "tplens/generate.hpp"
#include "tplens/instrument.hpp"
#include "tplens/lens.hpp"
#include "tplens/model.hpp"
#include "tplens/serialize.hpp"
#include "tplens/steer.hpp"
#include "tplens/tokenizer.hpp"
#include "tplens/tp_runtime.hpp"
#include "tplens/weights_io.hpp"

struct tpl_model {
  tplens::Model model;
};
struct tpl_trace {
  tplens::Trace trace;
};
struct tpl_report {
  tplens::LensReport report;
};
struct tpl_vector {
  tplens::SteeringVector vector;
};

namespace {

using namespace tplens;

thread_local std::string g_last_error;

tpl_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return TPL_E_INVALID_ARGUMENT;
    case ErrorKind::kShapeMismatch: return TPL_E_SHAPE;
    case ErrorKind::kNumeric: return TPL_E_NUMERIC;
    case ErrorKind::kIo: return TPL_E_IO;
    case ErrorKind::kFormat: return TPL_E_FORMAT;
    case ErrorKind::kSchema: return TPL_E_SCHEMA;
    case ErrorKind::kState: return TPL_E_STATE;
    case ErrorKind::kDegenerate: return TPL_E_DEGENERATE;
  }
  return TPL_E_INTERNAL;
}

struct BufferTooSmall {};

// Runs fn, translating exceptions into status codes and the thread-local
// message.
template <class Fn>
tpl_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return TPL_OK;
  } catch (const BufferTooSmall&) {
    g_last_error = "output buffer too small";
    return TPL_E_BUFFER_TOO_SMALL;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return TPL_E_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TPL_E_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  require(p != nullptr, ErrorKind::kInvalidArgument,
          std::string(what) + " must not be null");
}

template <class T>
void copy_out(std::span<const T> src, T* out, std::size_t cap, std::size_t* len) {
  need(len, "len");
  *len = src.size();
  if (src.size() > cap) throw BufferTooSmall{};
  if (!src.empty()) {
    need(out, "out");
    std::copy(src.begin(), src.end(), out);
  }
}

ActivationType to_type(tpl_activation t) {
  switch (t) {
    case TPL_ATTN_OUT: return ActivationType::kAttnOut;
    case TPL_MLP_OUT: return ActivationType::kMlpOut;
    case TPL_BLOCK_OUT: return ActivationType::kBlockOut;
  }
  fail(ErrorKind::kInvalidArgument, "unknown activation type");
}

std::vector<TokenId> tokens_of(const int32_t* p, std::size_t n) {
  require(n == 0 || p != nullptr, ErrorKind::kInvalidArgument,
          "token pointer must not be null");
  return std::vector<TokenId>(p, p + n);
}

std::vector<ActivationType> types_of(const char* spec) {
  if (spec == nullptr || *spec == '\0') {
    return {kAllActivationTypes.begin(), kAllActivationTypes.end()};
  }
  return parse_activation_types(spec);
}

std::vector<std::vector<TokenId>> encode_all(const char* const* texts,
                                             std::size_t n,
                                             std::size_t vocab_size) {
  require(n == 0 || texts != nullptr, ErrorKind::kInvalidArgument,
          "prompt array must not be null");
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < n; ++i) {
    need(texts[i], "prompt");
    out.push_back(encode_bytes(texts[i], vocab_size));
  }
  return out;
}

std::unique_ptr<Decoder> make_decoder(const Model& model, std::uint32_t tp) {
  if (tp > 1) return std::make_unique<TpEngine>(model, tp);
  return std::make_unique<DenseDecoder>(model);
}

}  // namespace

extern "C" {

const char* tpl_version(void) { return "0.1.0"; }

const char* tpl_status_name(tpl_status status) {
  switch (status) {
    case TPL_OK: return "ok";
    case TPL_E_INVALID_ARGUMENT: return "invalid argument";
    case TPL_E_SHAPE: return "shape mismatch";
    case TPL_E_NUMERIC: return "numeric error";
    case TPL_E_IO: return "i/o error";
    case TPL_E_FORMAT: return "format error";
    case TPL_E_SCHEMA: return "schema error";
    case TPL_E_STATE: return "state error";
    case TPL_E_DEGENERATE: return "degenerate input";
    case TPL_E_BUFFER_TOO_SMALL: return "buffer too small";
    case TPL_E_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* tpl_last_error(void) { return g_last_error.c_str(); }

// ---- model

void tpl_model_config_default(tpl_model_config* config) {
  if (config == nullptr) return;
  const ModelConfig c;
  *config = {static_cast<uint32_t>(c.d_model), static_cast<uint32_t>(c.n_layers),
             static_cast<uint32_t>(c.n_heads), 0,
             static_cast<uint32_t>(c.vocab_size), static_cast<uint32_t>(c.max_seq),
             c.rope_theta, c.norm_eps};
}

tpl_status tpl_model_create_random(const tpl_model_config* config,
                                   uint64_t seed, tpl_model** out) {
  return guarded([&] {
    need(config, "config");
    need(out, "out");
    ModelConfig c;
    c.d_model = config->d_model;
    c.n_layers = config->n_layers;
    c.n_heads = config->n_heads;
    c.d_ff = config->d_ff != 0 ? config->d_ff : default_ff_width(config->d_model);
    c.vocab_size = config->vocab_size;
    c.max_seq = config->max_seq;
    c.rope_theta = config->rope_theta;
    c.norm_eps = config->norm_eps;
    *out = new tpl_model{init_random(c, seed)};
  });
}

tpl_status tpl_model_load(const char* path, tpl_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpl_model{load_weights(path)};
  });
}

tpl_status tpl_model_save(const tpl_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    save_weights(path, model->model);
  });
}

tpl_status tpl_model_get_config(const tpl_model* model, tpl_model_config* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    const auto& c = model->model.config;
    *out = {static_cast<uint32_t>(c.d_model), static_cast<uint32_t>(c.n_layers),
            static_cast<uint32_t>(c.n_heads), static_cast<uint32_t>(c.d_ff),
            static_cast<uint32_t>(c.vocab_size), static_cast<uint32_t>(c.max_seq),
            c.rope_theta, c.norm_eps};
  });
}

tpl_status tpl_model_checksum(const tpl_model* model, uint64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = weights_checksum(model->model.weights);
  });
}

void tpl_model_free(tpl_model* model) { delete model; }

// ---- tokens

tpl_status tpl_encode(const char* text, int32_t* out, size_t cap, size_t* len) {
  return guarded([&] {
    need(text, "text");
    const auto ids = encode_bytes(text);
    copy_out<int32_t>(ids, out, cap, len);
  });
}

tpl_status tpl_parse_token_list(const char* list, uint32_t vocab_size,
                                int32_t* out, size_t cap, size_t* len) {
  return guarded([&] {
    need(list, "list");
    const auto ids = parse_token_list(list, vocab_size);
    copy_out<int32_t>(ids, out, cap, len);
  });
}

tpl_status tpl_decode(const int32_t* tokens, size_t n, char* out, size_t cap,
                      size_t* len) {
  return guarded([&] {
    need(len, "len");
    const auto ids = tokens_of(tokens, n);
    const std::string text = decode_bytes(ids, kByteVocabSize);
    *len = text.size();
    if (text.size() + 1 > cap) throw BufferTooSmall{};
    need(out, "out");
    std::memcpy(out, text.c_str(), text.size() + 1);
  });
}

// ---- capture

tpl_status tpl_memory_estimate(uint64_t tokens, uint64_t d_model,
                               uint64_t n_layers, uint64_t n_types,
                               tpl_precision precision, uint64_t* elements,
                               uint64_t* bytes) {
  return guarded([&] {
    need(elements, "elements");
    const auto e = memory_elements(tokens, d_model, n_layers, n_types);
    *elements = e;
    if (bytes != nullptr) {
      *bytes = memory_bytes(e, precision == TPL_BF16 ? Precision::kBF16
                                                     : Precision::kF32);
    }
  });
}

void tpl_trace_options_default(tpl_trace_options* options) {
  if (options == nullptr) return;
  *options = {nullptr, nullptr, 1, 0};
}

tpl_status tpl_trace_run(const tpl_model* model, const int32_t* prompt,
                         size_t prompt_len, uint32_t budget,
                         const tpl_trace_options* options, tpl_trace** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    tpl_trace_options o;
    tpl_trace_options_default(&o);
    if (options != nullptr) o = *options;
    const Model& m = model->model;
    TraceOptions topts;
    topts.capture.layers = parse_layer_spec(o.layers ? o.layers : "all",
                                            m.config.n_layers);
    topts.capture.types = types_of(o.types);
    topts.generate.capture_prefill = o.capture_prefill != 0;
    auto decoder = make_decoder(m, o.tp);
    const auto ids = tokens_of(prompt, prompt_len);
    *out = new tpl_trace{run_trace(*decoder, ids, budget, topts)};
  });
}

tpl_status tpl_trace_save(const tpl_trace* trace, const char* dir) {
  return guarded([&] {
    need(trace, "trace");
    need(dir, "dir");
    save_trace(trace->trace, dir);
  });
}

tpl_status tpl_trace_load(const char* dir, tpl_trace** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = new tpl_trace{load_trace(dir)};
  });
}

tpl_status tpl_trace_generated(const tpl_trace* trace, int32_t* out, size_t cap,
                               size_t* len) {
  return guarded([&] {
    need(trace, "trace");
    copy_out<int32_t>(trace->trace.generated, out, cap, len);
  });
}

tpl_status tpl_trace_steps(const tpl_trace* trace, size_t* out) {
  return guarded([&] {
    need(trace, "trace");
    need(out, "out");
    *out = trace->trace.store.length();
  });
}

tpl_status tpl_trace_trajectory(const tpl_trace* trace, uint32_t layer,
                                tpl_activation type, float* out, size_t cap,
                                size_t* len) {
  return guarded([&] {
    need(trace, "trace");
    const Tensor h = trace->trace.store.get_trajectory(layer, to_type(type));
    copy_out<float>(h.data(), out, cap, len);
  });
}

void tpl_trace_free(tpl_trace* trace) { delete trace; }

// ---- lens report

tpl_status tpl_report_build(const tpl_trace* trace, const tpl_model* model,
                            uint32_t k, uint32_t tp, tpl_report** out) {
  return guarded([&] {
    need(trace, "trace");
    need(model, "model");
    need(out, "out");
    std::unique_ptr<TpEngine> engine;
    if (tp > 1) engine = std::make_unique<TpEngine>(model->model, tp);
    *out = new tpl_report{build_report(trace->trace, model->model, {k, engine.get()})};
  });
}

tpl_status tpl_report_save(const tpl_report* report, const char* path) {
  return guarded([&] {
    need(report, "report");
    need(path, "path");
    save_report(report->report, path);
  });
}

tpl_status tpl_report_load(const char* path, tpl_report** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpl_report{load_report(path)};
  });
}

tpl_status tpl_report_parse(const char* json_text, tpl_report** out) {
  return guarded([&] {
    need(json_text, "json_text");
    need(out, "out");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::kSchema, std::string("schema error at /: ") + e.what());
    }
    *out = new tpl_report{report_from_json(j)};
  });
}

tpl_status tpl_report_top1(const tpl_report* report, uint32_t layer,
                           tpl_activation type, uint32_t t, int32_t* id,
                           float* p) {
  return guarded([&] {
    need(report, "report");
    const auto& pos = report->report.at(layer, to_type(type), t);
    require(!pos.topk.empty(), ErrorKind::kState, "empty top-k record");
    if (id != nullptr) *id = pos.topk.front().id;
    if (p != nullptr) *p = pos.topk.front().p;
  });
}

tpl_status tpl_report_records(const tpl_report* report, size_t* out) {
  return guarded([&] {
    need(report, "report");
    need(out, "out");
    *out = report->report.record_count();
  });
}

tpl_status tpl_report_svg(const tpl_report* report, const char* types,
                          int32_t layer_lo, int32_t layer_hi, const char* path) {
  return guarded([&] {
    need(report, "report");
    need(path, "path");
    HeatmapOptions o;
    if (types != nullptr && *types != '\0') o.types = parse_activation_types(types);
    if (layer_lo >= 0) o.layer_lo = static_cast<std::size_t>(layer_lo);
    if (layer_hi >= 0) o.layer_hi = static_cast<std::size_t>(layer_hi);
    write_text_file(path, heatmap_svg(report->report, o));
  });
}

void tpl_report_free(tpl_report* report) { delete report; }

// ---- steering

tpl_status tpl_vector_build(const tpl_model* model,
                            const char* const* base_prompts, size_t n_base,
                            const char* const* target_prompts, size_t n_target,
                            uint32_t layer, tpl_activation type,
                            tpl_vector** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    require(n_base >= 1 && n_target >= 1, ErrorKind::kInvalidArgument,
            "need at least one base and one target prompt");
    const Model& m = model->model;
    const ActivationType at = to_type(type);
    DenseDecoder decoder(m);
    auto mean_of = [&](const std::vector<std::vector<TokenId>>& prompts) {
      std::vector<double> acc(m.config.d_model, 0.0);
      for (const auto& p : prompts) {
        check_label_prompt(p);
        const Tensor h = extract_label_activation(decoder, p, layer, at);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h.data()[i];
      }
      std::vector<float> mean(acc.size());
      for (std::size_t i = 0; i < acc.size(); ++i) {
        mean[i] = static_cast<float>(acc[i] / static_cast<double>(prompts.size()));
      }
      return mean;
    };
    const auto base = mean_of(encode_all(base_prompts, n_base, m.config.vocab_size));
    const auto target =
        mean_of(encode_all(target_prompts, n_target, m.config.vocab_size));
    SteeringVector v = build_vector(target, base, layer, at);
    v.metadata["source"] = "contrastive";
    v.metadata["n_base"] = n_base;
    v.metadata["n_target"] = n_target;
    *out = new tpl_vector{std::move(v)};
  });
}

tpl_status tpl_vector_unembedding(const tpl_model* model, int32_t token,
                                  uint32_t layer, tpl_vector** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = new tpl_vector{unembedding_direction(model->model, token, layer)};
  });
}

tpl_status tpl_vector_save(const tpl_vector* vector, const char* path) {
  return guarded([&] {
    need(vector, "vector");
    need(path, "path");
    save_vector(vector->vector, path);
  });
}

tpl_status tpl_vector_load(const char* path, tpl_vector** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpl_vector{load_vector(path)};
  });
}

tpl_status tpl_vector_layer(const tpl_vector* vector, uint32_t* out) {
  return guarded([&] {
    need(vector, "vector");
    need(out, "out");
    *out = static_cast<uint32_t>(vector->vector.layer);
  });
}

void tpl_vector_free(tpl_vector* vector) { delete vector; }

void tpl_sweep_options_default(tpl_sweep_options* options) {
  if (options == nullptr) return;
  *options = {nullptr, nullptr, 1.0f, 1, 0, 0};
}

tpl_status tpl_steer_sweep(const tpl_model* model, const tpl_vector* vector,
                           const char* const* prompts, size_t n_prompts,
                           int32_t target, const tpl_sweep_options* options,
                           const char* json_path, const char* csv_path,
                           tpl_sweep_summary* summary) {
  return guarded([&] {
    need(model, "model");
    need(vector, "vector");
    tpl_sweep_options o;
    tpl_sweep_options_default(&o);
    if (options != nullptr) o = *options;
    const Model& m = model->model;
    const auto alphas = o.alphas ? parse_alpha_grid(o.alphas) : default_alpha_grid();
    SweepOptions so;
    so.site = o.site ? parse_injection_site(o.site) : InjectionSite::kAttnOut;
    if (o.clip > 0.0f) {
      so.clip = o.clip;
    } else {
      so.clip.reset();
    }
    so.budget = o.budget;
    so.threads = o.threads;
    const auto encoded = encode_all(prompts, n_prompts, m.config.vocab_size);
    const auto results = run_sweep(m, encoded, vector->vector, target, alphas, so);
    const SteerStats stats = fit_stats(results);
    const auto control = shuffled_control(results, o.seed);
    const SteerStats control_stats = fit_stats(control);

    if (json_path != nullptr) {
      OrderedJson j = sweep_to_json(results, stats);
      j["target"] = target;
      j["site"] = injection_site_name(so.site);
      j["clip"] = so.clip ? OrderedJson(*so.clip) : OrderedJson(nullptr);
      j["layer"] = vector->vector.layer;
      j["control"] = {{"seed", o.seed},
                      {"mean_slope", control_stats.mean_slope},
                      {"p_value", control_stats.p_value}};
      write_text_file(json_path, j.dump(2) + "\n");
    }
    if (csv_path != nullptr) write_text_file(csv_path, sweep_to_csv(results));
    if (summary != nullptr) {
      *summary = {stats.mean_slope, stats.std_slope, stats.mean_r2,
                  stats.t_statistic, stats.p_value, control_stats.p_value,
                  static_cast<uint32_t>(stats.n_prompts)};
    }
  });
}

// ---- benchmark

void tpl_bench_options_default(tpl_bench_options* options) {
  if (options == nullptr) return;
  *options = {nullptr, 0, 3, 5, 1};
}

tpl_status tpl_bench(const tpl_model* model, const int32_t* prompt,
                     size_t prompt_len, const tpl_bench_options* options,
                     const char* json_path, const char* csv_path,
                     double* speedups) {
  return guarded([&] {
    need(model, "model");
    tpl_bench_options o;
    tpl_bench_options_default(&o);
    if (options != nullptr) o = *options;
    BenchOptions bo;
    if (o.budgets != nullptr) {
      bo.budgets.assign(o.budgets, o.budgets + o.n_budgets);
    }
    bo.repeats = o.repeats;
    bo.k = o.k;
    bo.tp = std::max<uint32_t>(o.tp, 1);
    const auto ids = tokens_of(prompt, prompt_len);
    const BenchReport report = bench_compare(model->model, ids, bo);
    if (json_path != nullptr) {
      write_text_file(json_path, bench_to_json(report).dump(2) + "\n");
    }
    if (csv_path != nullptr) write_text_file(csv_path, bench_to_csv(report));
    if (speedups != nullptr) {
      for (std::size_t i = 0; i < report.entries.size(); ++i) {
        speedups[i] = report.entries[i].speedup;
      }
    }
  });
}

}  // extern "C"
