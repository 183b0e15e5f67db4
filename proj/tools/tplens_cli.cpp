// tplens command line. Talks to the library only through the C API.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tplens/tplens.h"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

struct CliError {
  tpl_status status;
  std::string message;
};

void check(tpl_status s) {
  if (s != TPL_OK) throw CliError{s, tpl_last_error()};
}

[[noreturn]] void usage_error(const std::string& msg) {
  throw CliError{TPL_E_INVALID_ARGUMENT, msg};
}

// RAII owners for the opaque handles.
template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};
using ModelH = Handle<tpl_model, tpl_model_free>;
using TraceH = Handle<tpl_trace, tpl_trace_free>;
using ReportH = Handle<tpl_report, tpl_report_free>;
using VectorH = Handle<tpl_vector, tpl_vector_free>;

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

ojson config_json(const tpl_model_config& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Manifest beside the outputs: <dir>/manifest.json for directory outputs,
// <file>.manifest.json for single files.
void write_manifest(const fs::path& where, bool is_dir, const std::string& command,
                    ojson config, std::optional<std::uint64_t> seed,
                    const std::vector<fs::path>& outputs, const std::string& started) {
  ojson m;
  m["command"] = command;
  m["config"] = std::move(config);
  m["seed"] = seed ? ojson(*seed) : ojson(nullptr);
  m["started"] = started;
  m["finished"] = now_utc();
  m["outputs"] = ojson::array();
  for (const auto& o : outputs) m["outputs"].push_back(fs::absolute(o).string());
  const fs::path path = is_dir ? where / "manifest.json"
                               : fs::path(where.string() + ".manifest.json");
  std::ofstream f(path, std::ios::trunc);
  f << m.dump(2) << "\n";
  if (!f) throw CliError{TPL_E_IO, "cannot write " + path.string()};
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void load_model(const std::string& path, ModelH& m) {
  if (!fs::exists(path)) throw CliError{TPL_E_IO, "model file not found: " + path};
  check(tpl_model_load(path.c_str(), m.out()));
}

std::vector<int32_t> encode(const std::string& text) {
  size_t n = 0;
  tpl_encode(text.c_str(), nullptr, 0, &n);
  std::vector<int32_t> ids(n);
  check(tpl_encode(text.c_str(), ids.data(), ids.size(), &n));
  return ids;
}

std::vector<int32_t> parse_ids(const std::string& list, uint32_t vocab) {
  size_t n = 0;
  tpl_parse_token_list(list.c_str(), vocab, nullptr, 0, &n);
  std::vector<int32_t> ids(n);
  check(tpl_parse_token_list(list.c_str(), vocab, ids.data(), ids.size(), &n));
  return ids;
}

// One prompt per line; blank lines skipped, trailing spaces kept.
std::vector<std::string> read_prompt_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw CliError{TPL_E_IO, "cannot read prompt file: " + path};
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  if (out.empty()) throw CliError{TPL_E_INVALID_ARGUMENT, "no prompts in " + path};
  return out;
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
  std::vector<const char*> out;
  for (const auto& s : v) out.push_back(s.c_str());
  return out;
}

uint32_t tp_from_env(uint32_t flag) {
  if (const char* env = std::getenv("LENS_TP"); env != nullptr && *env != '\0') {
    try {
      const long v = std::stol(env);
      if (v < 1) throw std::invalid_argument("");
      return static_cast<uint32_t>(v);
    } catch (const std::exception&) {
      usage_error(std::string("LENS_TP must be a positive integer, got '") + env + "'");
    }
  }
  return flag;
}

tpl_activation parse_type(const std::string& s) {
  if (s == "attn" || s == "attn_out") return TPL_ATTN_OUT;
  if (s == "mlp" || s == "mlp_out") return TPL_MLP_OUT;
  if (s == "block" || s == "block_out") return TPL_BLOCK_OUT;
  usage_error("unknown activation type '" + s + "'");
}

int32_t label_token(const std::string& label) {
  if (label.size() != 1) usage_error("label must be a single byte, got '" + label + "'");
  return static_cast<unsigned char>(label[0]);
}

std::string escaped(const std::string& bytes) {
  std::string out;
  for (unsigned char ch : bytes) {
    if (ch >= 0x20 && ch < 0x7f && ch != '"' && ch != '\\') {
      out += static_cast<char>(ch);
    } else {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02x", ch);
      out += buf;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct InitArgs {
  uint32_t d = 64, layers = 4, heads = 4, vocab = 258, ff = 0, max_seq = 1024;
  std::uint64_t seed = 0;
  std::string out = "model.bin";
};

void run_init(const InitArgs& a) {
  const auto started = now_utc();
  tpl_model_config c;
  tpl_model_config_default(&c);
  c.d_model = a.d;
  c.n_layers = a.layers;
  c.n_heads = a.heads;
  c.vocab_size = a.vocab;
  c.d_ff = a.ff;
  c.max_seq = a.max_seq;
  ModelH m;
  check(tpl_model_create_random(&c, a.seed, m.out()));
  ensure_parent(a.out);
  check(tpl_model_save(m.get(), a.out.c_str()));
  check(tpl_model_get_config(m.get(), &c));
  std::uint64_t sum = 0;
  check(tpl_model_checksum(m.get(), &sum));
  ojson cfg = config_json(c);
  cfg["weights_checksum"] = hex64(sum);
  write_manifest(a.out, false, "init", cfg, a.seed, {a.out}, started);
  std::cout << "wrote " << a.out << " (checksum " << hex64(sum) << ")\n";
}

struct TraceArgs {
  std::string model, prompt, prompt_ids, layers = "all", types = "attn,mlp,block";
  uint32_t budget = 16, tp = 1;
  bool prefill = false;
  std::string out = "trace";
};

void run_trace(const TraceArgs& a) {
  const auto started = now_utc();
  ModelH m;
  load_model(a.model, m);
  tpl_model_config c;
  check(tpl_model_get_config(m.get(), &c));
  if (a.prompt.empty() == a.prompt_ids.empty()) {
    usage_error("give exactly one of --prompt or --prompt-ids");
  }
  const auto ids = a.prompt.empty() ? parse_ids(a.prompt_ids, c.vocab_size)
                                    : encode(a.prompt);
  const uint32_t tp = tp_from_env(a.tp);
  tpl_trace_options o;
  tpl_trace_options_default(&o);
  o.layers = a.layers.c_str();
  o.types = a.types.c_str();
  o.tp = tp;
  o.capture_prefill = a.prefill ? 1 : 0;
  TraceH t;
  check(tpl_trace_run(m.get(), ids.data(), ids.size(), a.budget, &o, t.out()));
  check(tpl_trace_save(t.get(), a.out.c_str()));

  size_t n = 0;
  tpl_trace_generated(t.get(), nullptr, 0, &n);
  std::vector<int32_t> gen(n);
  check(tpl_trace_generated(t.get(), gen.data(), gen.size(), &n));
  std::uint64_t sum = 0;
  check(tpl_model_checksum(m.get(), &sum));

  ojson cfg;
  cfg["model"] = fs::absolute(a.model).string();
  cfg["model_config"] = config_json(c);
  cfg["weights_checksum"] = hex64(sum);
  cfg["budget"] = a.budget;
  cfg["tp"] = tp;
  cfg["layers"] = a.layers;
  cfg["types"] = a.types;
  cfg["capture_prefill"] = a.prefill;
  const fs::path dir(a.out);
  write_manifest(dir, true, "trace", cfg, std::nullopt,
                 {dir / "tokens.json", dir / "trajectories.bin",
                  dir / "trajectories.json"},
                 started);
  size_t tn = 0;
  tpl_decode(gen.data(), gen.size(), nullptr, 0, &tn);
  std::string text(tn + 1, '\0');
  check(tpl_decode(gen.data(), gen.size(), text.data(), text.size(), &tn));
  text.resize(tn);
  std::cout << "generated " << gen.size() << " tokens";
  if (!gen.empty()) std::cout << ": \"" << escaped(text) << '"';
  std::cout << "\n";
}

struct LensArgs {
  std::string trace, model, out = "report.json", svg, types, layers;
  uint32_t topk = 5, tp = 1;
};

void run_lens(const LensArgs& a) {
  const auto started = now_utc();
  const fs::path dir(a.trace);
  std::string model_path = a.model;
  ojson trace_manifest;
  if (const fs::path mp = dir / "manifest.json"; fs::exists(mp)) {
    std::ifstream f(mp);
    trace_manifest = ojson::parse(f, nullptr, false);
  }
  if (model_path.empty()) {
    if (trace_manifest.is_discarded() || !trace_manifest.contains("config") ||
        !trace_manifest["config"].contains("model")) {
      usage_error("trace has no manifest naming its model; pass --model");
    }
    model_path = trace_manifest["config"]["model"].get<std::string>();
  }
  ModelH m;
  load_model(model_path, m);
  if (!trace_manifest.is_discarded() && trace_manifest.contains("config") &&
      trace_manifest["config"].contains("weights_checksum")) {
    std::uint64_t sum = 0;
    check(tpl_model_checksum(m.get(), &sum));
    if (trace_manifest["config"]["weights_checksum"] != hex64(sum)) {
      throw CliError{TPL_E_STATE, "model checksum differs from the one the trace "
                                  "was generated with"};
    }
  }
  TraceH t;
  check(tpl_trace_load(a.trace.c_str(), t.out()));
  ReportH r;
  const uint32_t tp = tp_from_env(a.tp);
  check(tpl_report_build(t.get(), m.get(), a.topk, tp, r.out()));
  ensure_parent(a.out);
  check(tpl_report_save(r.get(), a.out.c_str()));
  std::vector<fs::path> outputs{a.out};
  if (!a.svg.empty()) {
    int32_t lo = -1, hi = -1;
    if (!a.layers.empty()) {
      const auto dots = a.layers.find("..");
      try {
        if (dots == std::string::npos) {
          lo = hi = std::stoi(a.layers);
        } else {
          lo = std::stoi(a.layers.substr(0, dots));
          hi = std::stoi(a.layers.substr(dots + 2));
        }
      } catch (const std::exception&) {
        usage_error("--layers for the heatmap must be 'a..b' or a single layer");
      }
    }
    ensure_parent(a.svg);
    check(tpl_report_svg(r.get(), a.types.empty() ? nullptr : a.types.c_str(), lo,
                         hi, a.svg.c_str()));
    outputs.emplace_back(a.svg);
  }
  size_t records = 0;
  check(tpl_report_records(r.get(), &records));
  ojson cfg{{"trace", fs::absolute(dir).string()},
            {"model", fs::absolute(model_path).string()},
            {"topk", a.topk},
            {"tp", tp}};
  write_manifest(a.out, false, "lens", cfg, std::nullopt, outputs, started);
  std::cout << "wrote " << a.out << " (" << records << " records)\n";
}

struct SteerBuildArgs {
  std::string model, base, target, unembed, type = "attn_out", out = "vec.bin";
  uint32_t layer = 0;
};

void run_steer_build(const SteerBuildArgs& a) {
  const auto started = now_utc();
  ModelH m;
  load_model(a.model, m);
  VectorH v;
  ojson cfg{{"model", fs::absolute(a.model).string()}, {"layer", a.layer}};
  if (!a.unembed.empty()) {
    if (!a.base.empty() || !a.target.empty()) {
      usage_error("--unembed cannot be combined with --base/--target");
    }
    check(tpl_vector_unembedding(m.get(), label_token(a.unembed), a.layer, v.out()));
    cfg["unembed"] = a.unembed;
  } else {
    if (a.base.empty() || a.target.empty()) {
      usage_error("steer build needs --base and --target prompt files (or --unembed)");
    }
    const auto base = read_prompt_file(a.base);
    const auto target = read_prompt_file(a.target);
    const auto bp = c_strings(base), tp = c_strings(target);
    check(tpl_vector_build(m.get(), bp.data(), bp.size(), tp.data(), tp.size(),
                           a.layer, parse_type(a.type), v.out()));
    cfg["base"] = fs::absolute(a.base).string();
    cfg["target"] = fs::absolute(a.target).string();
    cfg["type"] = a.type;
  }
  ensure_parent(a.out);
  check(tpl_vector_save(v.get(), a.out.c_str()));
  write_manifest(a.out, false, "steer build", cfg, std::nullopt, {a.out}, started);
  std::cout << "wrote " << a.out << "\n";
}

struct SteerSweepArgs {
  std::string model, vec, alphas = "-1.5:1.5:7", prompts, label = "A",
                          site = "attn_out", clip = "1.0", out = "sweep.json", csv;
  uint32_t budget = 1, threads = 0;
  std::uint64_t seed = 0;
};

void run_steer_sweep(const SteerSweepArgs& a) {
  const auto started = now_utc();
  ModelH m;
  load_model(a.model, m);
  VectorH v;
  check(tpl_vector_load(a.vec.c_str(), v.out()));
  const auto prompts = read_prompt_file(a.prompts);
  const auto pp = c_strings(prompts);
  tpl_sweep_options o;
  tpl_sweep_options_default(&o);
  o.alphas = a.alphas.c_str();
  o.site = a.site.c_str();
  if (a.clip == "none") {
    o.clip = 0.0f;
  } else {
    try {
      o.clip = std::stof(a.clip);
    } catch (const std::exception&) {
      usage_error("--clip must be a positive number or 'none'");
    }
    if (!(o.clip > 0.0f)) usage_error("--clip must be a positive number or 'none'");
  }
  o.budget = a.budget;
  o.threads = a.threads;
  o.seed = a.seed;
  const std::string csv = a.csv.empty() ? fs::path(a.out).replace_extension(".csv").string()
                                        : a.csv;
  ensure_parent(a.out);
  ensure_parent(csv);
  tpl_sweep_summary s{};
  check(tpl_steer_sweep(m.get(), v.get(), pp.data(), pp.size(), label_token(a.label),
                        &o, a.out.c_str(), csv.c_str(), &s));
  ojson cfg{{"model", fs::absolute(a.model).string()},
            {"vector", fs::absolute(a.vec).string()},
            {"prompts", fs::absolute(a.prompts).string()},
            {"alphas", a.alphas},
            {"label", a.label},
            {"site", a.site},
            {"clip", a.clip},
            {"budget", a.budget}};
  write_manifest(a.out, false, "steer sweep", cfg, a.seed, {a.out, csv}, started);
  std::printf("prompts=%u mean_slope=%.6g std_slope=%.6g mean_r2=%.4f t=%.4g p=%.4g "
              "control_p=%.4g\n",
              s.n_prompts, s.mean_slope, s.std_slope, s.mean_r2, s.t_statistic,
              s.p_value, s.control_p_value);
}

struct BenchArgs {
  std::string model, prompt = "The quick brown fox", out = "bench.json", csv;
  std::vector<uint32_t> budgets{100, 300, 500};
  uint32_t repeats = 3, topk = 5, tp = 1;
};

void run_bench(const BenchArgs& a) {
  const auto started = now_utc();
  ModelH m;
  load_model(a.model, m);
  const auto ids = encode(a.prompt);
  tpl_bench_options o;
  tpl_bench_options_default(&o);
  o.budgets = a.budgets.data();
  o.n_budgets = a.budgets.size();
  o.repeats = a.repeats;
  o.k = a.topk;
  o.tp = tp_from_env(a.tp);
  const std::string csv = a.csv.empty() ? fs::path(a.out).replace_extension(".csv").string()
                                        : a.csv;
  ensure_parent(a.out);
  ensure_parent(csv);
  std::vector<double> speedups(a.budgets.size());
  check(tpl_bench(m.get(), ids.data(), ids.size(), &o, a.out.c_str(), csv.c_str(),
                  speedups.data()));
  ojson cfg{{"model", fs::absolute(a.model).string()},
            {"prompt", a.prompt},
            {"budgets", a.budgets},
            {"repeats", a.repeats},
            {"topk", a.topk},
            {"tp", o.tp}};
  write_manifest(a.out, false, "bench", cfg, std::nullopt, {a.out, csv}, started);
  for (std::size_t i = 0; i < a.budgets.size(); ++i) {
    std::printf("T=%u speedup=%.2fx\n", a.budgets[i], speedups[i]);
  }
}

struct MemoryArgs {
  std::uint64_t tokens = 1500, d = 8192, layers = 80, types = 1;
  std::string precision = "bf16";
};

void run_memory(const MemoryArgs& a) {
  tpl_precision p = TPL_BF16;
  if (a.precision == "f32") {
    p = TPL_F32;
  } else if (a.precision != "bf16") {
    usage_error("--precision must be f32 or bf16");
  }
  std::uint64_t elements = 0, bytes = 0;
  check(tpl_memory_estimate(a.tokens, a.d, a.layers, a.types, p, &elements, &bytes));
  std::printf("elements=%llu bytes=%llu (%.3f GB)\n",
              static_cast<unsigned long long>(elements),
              static_cast<unsigned long long>(bytes), static_cast<double>(bytes) / 1e9);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tplens: tensor-parallel logit lens and activation steering"};
  app.require_subcommand(1);

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "create a seeded random model");
  c_init->add_option("--d", init.d, "model width");
  c_init->add_option("--layers", init.layers, "number of blocks");
  c_init->add_option("--heads", init.heads, "attention heads");
  c_init->add_option("--vocab", init.vocab, "vocabulary size (>= 258)");
  c_init->add_option("--ff", init.ff, "MLP width (0 = 8d/3 rounded to 8)");
  c_init->add_option("--max-seq", init.max_seq, "context limit");
  c_init->add_option("--seed", init.seed, "weight seed");
  c_init->add_option("-o,--out", init.out, "weight file");

  TraceArgs trace;
  auto* c_trace = app.add_subcommand("trace", "greedy generation with capture");
  c_trace->add_option("--model", trace.model, "weight file")->required();
  c_trace->add_option("--prompt", trace.prompt, "prompt text (byte tokenized)");
  c_trace->add_option("--prompt-ids", trace.prompt_ids, "comma-separated token ids");
  c_trace->add_option("--budget", trace.budget, "tokens to generate");
  c_trace->add_option("--tp", trace.tp, "shard count (LENS_TP overrides)");
  c_trace->add_option("--layers", trace.layers, "all, a..b or a,b,c");
  c_trace->add_option("--types", trace.types, "attn,mlp,block subset");
  c_trace->add_flag("--prefill", trace.prefill, "also capture prompt positions");
  c_trace->add_option("-o,--out", trace.out, "trace directory");

  LensArgs lens;
  auto* c_lens = app.add_subcommand("lens", "project a trace into a lens report");
  c_lens->add_option("--trace", lens.trace, "trace directory")->required();
  c_lens->add_option("--model", lens.model, "weight file (default: from manifest)");
  c_lens->add_option("--topk", lens.topk, "entries per record");
  c_lens->add_option("--tp", lens.tp, "vocab shards for the projection");
  c_lens->add_option("-o,--out", lens.out, "report JSON");
  c_lens->add_option("--svg", lens.svg, "heatmap output");
  c_lens->add_option("--layers", lens.layers, "heatmap layer range a..b");
  c_lens->add_option("--types", lens.types, "heatmap activation types");

  auto* c_steer = app.add_subcommand("steer", "steering vectors and sweeps");
  c_steer->require_subcommand(1);
  SteerBuildArgs sb;
  auto* c_sb = c_steer->add_subcommand("build", "build a steering vector");
  c_sb->add_option("--model", sb.model, "weight file")->required();
  c_sb->add_option("--base", sb.base, "base prompts, one per line");
  c_sb->add_option("--target", sb.target, "target prompts, one per line");
  c_sb->add_option("--unembed", sb.unembed, "use the LM-head row of this byte");
  c_sb->add_option("--layer", sb.layer, "layer index");
  c_sb->add_option("--type", sb.type, "activation type to contrast");
  c_sb->add_option("-o,--out", sb.out, "vector file");
  SteerSweepArgs ss;
  auto* c_ss = c_steer->add_subcommand("sweep", "dose-response sweep over alpha");
  c_ss->add_option("--model", ss.model, "weight file")->required();
  c_ss->add_option("--vec", ss.vec, "vector file")->required();
  c_ss->add_option("--prompts", ss.prompts, "prompts, one per line")->required();
  c_ss->add_option("--alphas", ss.alphas, "lo:hi:n grid");
  c_ss->add_option("--label", ss.label, "target label byte");
  c_ss->add_option("--site", ss.site, "attn_out or block_out");
  c_ss->add_option("--clip", ss.clip, "relative clip or 'none'");
  c_ss->add_option("--budget", ss.budget, "tokens generated per run");
  c_ss->add_option("--threads", ss.threads, "worker threads (0 = all cores)");
  c_ss->add_option("--seed", ss.seed, "shuffled-control seed");
  c_ss->add_option("-o,--out", ss.out, "results JSON");
  c_ss->add_option("--csv", ss.csv, "results CSV (default: beside the JSON)");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "single-pass vs re-forwarding timing");
  c_bench->add_option("--model", bench.model, "weight file")->required();
  c_bench->add_option("--prompt", bench.prompt, "prompt text");
  c_bench->add_option("--budgets", bench.budgets, "generation lengths")->delimiter(',');
  c_bench->add_option("--repeats", bench.repeats, "timed runs per budget (>= 3)");
  c_bench->add_option("--topk", bench.topk, "lens width");
  c_bench->add_option("--tp", bench.tp, "shard count (LENS_TP overrides)");
  c_bench->add_option("-o,--out", bench.out, "report JSON");
  c_bench->add_option("--csv", bench.csv, "CSV mirror (default: beside the JSON)");

  MemoryArgs mem;
  auto* c_mem = app.add_subcommand("memory", "capture footprint estimate");
  c_mem->add_option("--tokens", mem.tokens, "captured positions");
  c_mem->add_option("--d", mem.d, "model width");
  c_mem->add_option("--layers", mem.layers, "captured layers");
  c_mem->add_option("--types", mem.types, "activation types per layer");
  c_mem->add_option("--precision", mem.precision, "f32 or bf16");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_init->parsed()) run_init(init);
    if (c_trace->parsed()) run_trace(trace);
    if (c_lens->parsed()) run_lens(lens);
    if (c_sb->parsed()) run_steer_build(sb);
    if (c_ss->parsed()) run_steer_sweep(ss);
    if (c_bench->parsed()) run_bench(bench);
    if (c_mem->parsed()) run_memory(mem);
  } catch (const CliError& e) {
    std::cerr << "error (" << tpl_status_name(e.status) << "): " << e.message << "\n";
    return static_cast<int>(e.status);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
