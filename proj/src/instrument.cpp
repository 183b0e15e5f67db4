#include "tplens/instrument.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>

#include "tplens/error.hpp"
#include "tplens/serialize.hpp"

namespace tplens {

using nlohmann::json;

CaptureConfig CaptureConfig::all(const ModelConfig& model) {
  CaptureConfig c;
  for (std::size_t l = 0; l < model.n_layers; ++l) c.layers.push_back(l);
  c.types.assign(kAllActivationTypes.begin(), kAllActivationTypes.end());
  return c;
}

void CaptureConfig::validate(const ModelConfig& model) const {
  if (!enabled) return;
  require(!layers.empty() && !types.empty(), ErrorKind::kInvalidArgument,
          "capture enabled with no layers or no activation types");
  for (std::size_t l : layers) {
    require(l < model.n_layers, ErrorKind::kInvalidArgument,
            "wrapped layer " + std::to_string(l) + " >= n_layers " +
                std::to_string(model.n_layers));
  }
}

bool CaptureConfig::wants(std::size_t layer, ActivationType type) const {
  return enabled &&
         std::find(layers.begin(), layers.end(), layer) != layers.end() &&
         std::find(types.begin(), types.end(), type) != types.end();
}

std::vector<std::size_t> parse_layer_spec(std::string_view spec,
                                          std::size_t n_layers) {
  auto number = [&](std::string_view s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && p == s.data() + s.size() && !s.empty(),
            ErrorKind::kInvalidArgument,
            "bad layer index '" + std::string(s) + "'");
    require(v < n_layers, ErrorKind::kInvalidArgument,
            "layer " + std::to_string(v) + " >= n_layers " +
                std::to_string(n_layers));
    return v;
  };
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t l = 0; l < n_layers; ++l) out.push_back(l);
    return out;
  }
  if (auto dots = spec.find(".."); dots != std::string_view::npos) {
    const std::size_t a = number(spec.substr(0, dots));
    const std::size_t b = number(spec.substr(dots + 2));
    require(a <= b, ErrorKind::kInvalidArgument,
            "empty layer range '" + std::string(spec) + "'");
    for (std::size_t l = a; l <= b; ++l) out.push_back(l);
    return out;
  }
  std::size_t start = 0;
  while (start <= spec.size()) {
    std::size_t end = spec.find(',', start);
    if (end == std::string_view::npos) end = spec.size();
    out.push_back(number(spec.substr(start, end - start)));
    start = end + 1;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------

ActivationStore::ActivationStore(std::size_t d_model, CaptureConfig config)
    : d_model_(d_model), config_(std::move(config)) {
  if (!config_.enabled) return;
  for (std::size_t l : config_.layers) {
    for (ActivationType t : config_.types) trajectories_[{l, t}];
  }
}

void ActivationStore::record_slice(std::size_t layer, ActivationType type,
                                   std::span<const float> h,
                                   std::size_t step) {
  auto it = trajectories_.find({layer, type});
  require(it != trajectories_.end(), ErrorKind::kState,
          "layer " + std::to_string(layer) + " / " +
              std::string(activation_type_name(type)) + " is not captured");
  require(h.size() == d_model_, ErrorKind::kShapeMismatch,
          "slice of length " + std::to_string(h.size()) + ", expected " +
              std::to_string(d_model_));
  auto& list = it->second;
  require(step == list.size(), ErrorKind::kState,
          "out-of-order capture: step " + std::to_string(step) +
              " recorded after " + std::to_string(list.size()) + " entries");
  audit::note_capture_allocation(h.size());
  list.emplace_back(h.begin(), h.end());
}

Tensor ActivationStore::get_trajectory(std::size_t layer,
                                       ActivationType type) const {
  auto it = trajectories_.find({layer, type});
  require(it != trajectories_.end(), ErrorKind::kInvalidArgument,
          "no trajectory for layer " + std::to_string(layer) + " / " +
              std::string(activation_type_name(type)));
  const auto& list = it->second;
  std::vector<float> flat;
  flat.reserve(list.size() * d_model_);
  for (const auto& s : list) flat.insert(flat.end(), s.begin(), s.end());
  return Tensor(Shape{list.size(), d_model_}, std::move(flat));
}

std::span<const float> ActivationStore::slice(std::size_t layer,
                                              ActivationType type,
                                              std::size_t step) const {
  auto it = trajectories_.find({layer, type});
  require(it != trajectories_.end() && step < it->second.size(),
          ErrorKind::kInvalidArgument, "no such captured slice");
  return it->second[step];
}

bool ActivationStore::contains(std::size_t layer, ActivationType type) const {
  return trajectories_.count({layer, type}) != 0;
}

std::size_t ActivationStore::length(std::size_t layer,
                                    ActivationType type) const {
  auto it = trajectories_.find({layer, type});
  return it == trajectories_.end() ? 0 : it->second.size();
}

std::size_t ActivationStore::length() const {
  if (trajectories_.empty()) return 0;
  const std::size_t n = trajectories_.begin()->second.size();
  for (const auto& [key, list] : trajectories_) {
    require(list.size() == n, ErrorKind::kState,
            "trajectory lengths disagree across (layer, type)");
  }
  return n;
}

std::size_t ActivationStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [key, list] : trajectories_) {
    for (const auto& s : list) n += s.size();
  }
  return n;
}

std::vector<ActivationStore::Key> ActivationStore::keys() const {
  std::vector<Key> out;
  for (const auto& [key, list] : trajectories_) out.push_back(key);
  return out;
}

bool operator==(const ActivationStore& a, const ActivationStore& b) {
  return a.d_model_ == b.d_model_ && a.trajectories_ == b.trajectories_;
}

void ActivationRecorder::on_activation(const ActivationSite& site,
                                       std::span<float> h) {
  if (!store_.config().wants(site.layer, site.type)) return;
  require(site.position >= origin_, ErrorKind::kState,
          "capture before the recording window");
  store_.record_slice(site.layer, site.type, h, site.position - origin_);
}

// ---------------------------------------------------------------------------

std::uint64_t memory_elements(std::uint64_t tokens, std::uint64_t d_model,
                              std::uint64_t n_layers_wrapped,
                              std::uint64_t n_types) {
  return tokens * d_model * n_layers_wrapped * n_types;
}

std::uint64_t memory_bytes(std::uint64_t elements, Precision precision) {
  return elements * bytes_per_element(precision);
}

namespace audit {
namespace {
std::atomic<std::uint64_t> g_capture_allocs{0}, g_capture_max{0},
    g_vocab_buffers{0}, g_vocab_elements{0};
}  // namespace

Snapshot snapshot() {
  return {g_capture_allocs.load(), g_capture_max.load(), g_vocab_buffers.load(),
          g_vocab_elements.load()};
}

void note_capture_allocation(std::size_t elements) {
  g_capture_allocs.fetch_add(1, std::memory_order_relaxed);
  std::uint64_t cur = g_capture_max.load(std::memory_order_relaxed);
  while (elements > cur &&
         !g_capture_max.compare_exchange_weak(cur, elements)) {
  }
}

void note_vocab_buffer(std::size_t elements) {
  g_vocab_buffers.fetch_add(1, std::memory_order_relaxed);
  g_vocab_elements.fetch_add(elements, std::memory_order_relaxed);
}

}  // namespace audit

// ---------------------------------------------------------------------------

Trace run_trace(Decoder& decoder, std::span<const TokenId> prompt,
                std::size_t budget, const TraceOptions& options,
                std::span<LayerHook* const> interventions) {
  const auto& config = decoder.model().config;
  options.capture.validate(config);
  Trace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  trace.capture_prefill = options.generate.capture_prefill;
  trace.store = ActivationStore(config.d_model, options.capture);

  ActivationRecorder recorder(trace.store,
                              capture_origin(prompt.size(), options.generate));
  DecodeHooks hooks;
  hooks.interventions.assign(interventions.begin(), interventions.end());
  if (options.capture.enabled) hooks.observers.push_back(&recorder);
  auto result = greedy_decode(decoder, prompt, budget, hooks, options.generate);
  trace.generated = std::move(result.tokens);
  return trace;
}

namespace {

CaptureConfig capture_from_json(const json& j, const std::string& path) {
  CaptureConfig c;
  c.enabled = field_as<bool>(j, "enabled", path);
  c.layers = field_as<std::vector<std::size_t>>(j, "layers", path);
  const auto& types = require_array(j, "types", path);
  for (std::size_t i = 0; i < types.size(); ++i) {
    c.types.push_back(parse_activation_type(
        json_as<std::string>(types[i], path + "/types/" + std::to_string(i))));
  }
  return c;
}

}  // namespace

void save_trace(const Trace& trace, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& store = trace.store;
  const std::size_t T = store.length();

  OrderedJson tokens;
  tokens["prompt_tokens"] = trace.prompt;
  tokens["generated_tokens"] = trace.generated;
  write_text_file(dir / "tokens.json", tokens.dump(2) + "\n");

  OrderedJson index;
  index["d_model"] = store.d_model();
  index["steps"] = T;
  index["capture_prefill"] = trace.capture_prefill;
  index["tp"] = trace.tp;
  OrderedJson cap;
  cap["enabled"] = store.config().enabled;
  cap["layers"] = store.config().layers;
  cap["types"] = OrderedJson::array();
  for (auto t : store.config().types) cap["types"].push_back(activation_type_name(t));
  index["capture"] = cap;
  index["entries"] = OrderedJson::array();

  std::ofstream bin(dir / "trajectories.bin", std::ios::binary | std::ios::trunc);
  require(bool(bin), ErrorKind::kIo, "cannot write trajectories.bin");
  std::uint64_t offset = 0;
  for (const auto& [layer, type] : store.keys()) {
    const Tensor traj = store.get_trajectory(layer, type);
    write_f32_le(bin, traj.data());
    index["entries"].push_back({{"layer", layer},
                                {"type", activation_type_name(type)},
                                {"offset", offset},
                                {"rows", traj.dim(0)}});
    offset += traj.size() * 4;
  }
  bin.flush();
  require(bool(bin), ErrorKind::kIo, "write failed for trajectories.bin");
  write_text_file(dir / "trajectories.json", index.dump(2) + "\n");
}

Trace load_trace(const std::filesystem::path& dir) {
  Trace trace;
  const json tokens = read_json_file(dir / "tokens.json");
  trace.prompt = field_as<std::vector<TokenId>>(tokens, "prompt_tokens", "");
  trace.generated = field_as<std::vector<TokenId>>(tokens, "generated_tokens", "");

  const json index = read_json_file(dir / "trajectories.json");
  const auto d = field_as<std::size_t>(index, "d_model", "");
  trace.capture_prefill = field_as<bool>(index, "capture_prefill", "");
  trace.tp = field_as<std::size_t>(index, "tp", "");
  trace.store = ActivationStore(d, capture_from_json(require_field(index, "capture", ""), "/capture"));

  std::ifstream bin(dir / "trajectories.bin", std::ios::binary);
  require(bool(bin), ErrorKind::kIo, "cannot open trajectories.bin in '" + dir.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  const auto& entries = require_array(index, "entries", "");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string p = "/entries/" + std::to_string(i);
    const auto layer = field_as<std::size_t>(entries[i], "layer", p);
    const auto type = parse_activation_type(field_as<std::string>(entries[i], "type", p));
    const auto offset = field_as<std::uint64_t>(entries[i], "offset", p);
    const auto rows = field_as<std::size_t>(entries[i], "rows", p);
    require(offset + rows * d * 4 <= bytes.size(), ErrorKind::kFormat,
            "trajectories.bin truncated at entry " + std::to_string(i));
    std::vector<float> row(d);
    for (std::size_t r = 0; r < rows; ++r) {
      read_f32_le(bytes.data() + offset + r * d * 4, row);
      trace.store.record_slice(layer, type, row, r);
    }
  }
  return trace;
}

}  // namespace tplens
