#include "tplens/lens.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "tplens/error.hpp"
#include "tplens/tokenizer.hpp"
#include "tplens/tp_runtime.hpp"

namespace tplens {

using nlohmann::json;

std::size_t LensReport::record_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    for (const auto& t : l.types) n += t.positions.size();
  }
  return n;
}

const LensPosition& LensReport::at(std::size_t layer, ActivationType type,
                                   std::size_t t) const {
  for (const auto& l : layers) {
    if (l.layer != layer) continue;
    for (const auto& tb : l.types) {
      if (tb.type == type && t < tb.positions.size()) return tb.positions[t];
    }
  }
  fail(ErrorKind::kInvalidArgument,
       "report has no record for layer " + std::to_string(layer) + " / " +
           std::string(activation_type_name(type)) + " / t=" +
           std::to_string(t));
}

// ---------------------------------------------------------------------------
// Projection

namespace {

void check_trajectory(const Tensor& H, const ModelConfig& c) {
  require(H.rank() == 2 && H.dim(1) == c.d_model, ErrorKind::kShapeMismatch,
          "trajectory " + shape_string(H.shape()) + " does not match d_model " +
              std::to_string(c.d_model));
  check_finite(H.data(), "trajectory");
}

}  // namespace

Tensor project_trajectory(const Tensor& H, const Model& model) {
  check_trajectory(H, model.config);
  const auto& w = model.weights;
  const Tensor normed = rms_norm(H, w.final_norm, model.config.norm_eps);
  audit::note_vocab_buffer(H.dim(0) * model.config.vocab_size);
  Tensor logits = linear(normed, w.lm_head);
  for (std::size_t t = 0; t < logits.dim(0); ++t) {
    add_into(logits.row(t), w.lm_bias.data());
  }
  check_finite(logits.data(), "projected logits");
  return logits;
}

Tensor project_trajectory(const Tensor& H, TpEngine& engine) {
  const Model& model = engine.model();
  check_trajectory(H, model.config);
  const Tensor normed =
      rms_norm(H, model.weights.final_norm, model.config.norm_eps);
  audit::note_vocab_buffer(H.dim(0) * model.config.vocab_size);
  return engine.project_normalized(normed);
}

std::vector<float> project_row(std::span<const float> h, const Model& model) {
  require(h.size() == model.config.d_model, ErrorKind::kShapeMismatch,
          "hidden row length mismatch");
  std::vector<float> normed(h.size()), logits(model.config.vocab_size);
  audit::note_vocab_buffer(logits.size());
  project_hidden(model, h, normed, logits);
  check_finite(logits, "projected logits");
  return logits;
}

std::vector<TopKEntry> top_k_probs(std::span<const float> logits,
                                   std::size_t k, std::size_t vocab_size) {
  const auto top = top_k_select(logits, k);
  std::vector<float> values;
  values.reserve(top.size());
  for (const auto& e : top) values.push_back(e.value);
  const auto probs = softmax(values);
  std::vector<TopKEntry> out;
  out.reserve(top.size());
  for (std::size_t i = 0; i < top.size(); ++i) {
    const auto id = static_cast<TokenId>(top[i].index);
    out.push_back({id, token_text(id, std::max(vocab_size, logits.size())),
                   probs[i]});
  }
  return out;
}

namespace {

std::string checksum_hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

LensReport build_report(const Trace& trace, const Model& model,
                        const ReportOptions& options) {
  require(options.k >= 1, ErrorKind::kInvalidArgument, "top-k must be >= 1");
  const auto& store = trace.store;
  require(!store.keys().empty() && store.length() > 0, ErrorKind::kState,
          "cannot build a lens report from an empty activation store");
  require(store.d_model() == model.config.d_model, ErrorKind::kShapeMismatch,
          "trace d_model does not match the model");

  LensReport report;
  report.model = model.config;
  report.weights_checksum = checksum_hex(weights_checksum(model.weights));
  report.prompt_tokens = trace.prompt;
  report.generated_tokens = trace.generated;
  report.k = options.k;

  for (std::size_t layer : store.config().layers) {
    LensLayerBlock lb;
    lb.layer = layer;
    for (ActivationType type : store.config().types) {
      const Tensor H = store.get_trajectory(layer, type);
      const Tensor Z = options.engine ? project_trajectory(H, *options.engine)
                                      : project_trajectory(H, model);
      LensTypeBlock tb;
      tb.type = type;
      for (std::size_t t = 0; t < Z.dim(0); ++t) {
        tb.positions.push_back(
            {t, top_k_probs(Z.row(t), options.k, model.config.vocab_size)});
      }
      lb.types.push_back(std::move(tb));
    }
    report.layers.push_back(std::move(lb));
  }
  return report;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::ordered_json report_to_json(const LensReport& report) {
  OrderedJson j;
  j["schema_version"] = report.schema_version;
  OrderedJson model = config_to_json(report.model);
  model["weights_checksum"] = report.weights_checksum;
  j["model"] = std::move(model);
  j["prompt_tokens"] = report.prompt_tokens;
  j["generated_tokens"] = report.generated_tokens;
  j["k"] = report.k;
  OrderedJson layers = OrderedJson::array();
  for (const auto& lb : report.layers) {
    OrderedJson types = OrderedJson::array();
    for (const auto& tb : lb.types) {
      OrderedJson positions = OrderedJson::array();
      for (const auto& pos : tb.positions) {
        OrderedJson topk = OrderedJson::array();
        for (const auto& e : pos.topk) {
          topk.push_back({{"id", e.id},
                          {"text", e.text},
                          {"p", static_cast<double>(e.p)}});
        }
        positions.push_back({{"t", pos.t}, {"topk", std::move(topk)}});
      }
      types.push_back({{"type", activation_type_name(tb.type)},
                       {"positions", std::move(positions)}});
    }
    layers.push_back({{"layer", lb.layer}, {"types", std::move(types)}});
  }
  j["layers"] = std::move(layers);
  return j;
}

LensReport report_from_json(const json& j) {
  auto schema = [](const std::string& path, const std::string& msg) {
    fail(ErrorKind::kSchema, "schema error at " + path + ": " + msg);
  };
  LensReport r;
  const auto version = field_as<int>(j, "schema_version", "");
  if (version != kLensSchemaVersion) {
    schema("/schema_version", "version " + std::to_string(version) +
                                  " does not match supported version " +
                                  std::to_string(kLensSchemaVersion));
  }
  const auto& model = require_field(j, "model", "");
  r.model = config_from_json(model, "/model");
  r.weights_checksum = field_as<std::string>(model, "weights_checksum", "/model");
  try {
    r.model.validate();
  } catch (const Error& e) {
    schema("/model", e.what());
  }
  const std::size_t V = r.model.vocab_size;

  auto read_ids = [&](std::string_view key) {
    const auto& arr = require_array(j, key, "");
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = "/" + std::string(key) + "/" + std::to_string(i);
      const auto id = json_as<TokenId>(arr[i], p);
      if (id < 0 || static_cast<std::size_t>(id) >= V) schema(p, "token id out of range");
      ids.push_back(id);
    }
    return ids;
  };
  r.prompt_tokens = read_ids("prompt_tokens");
  r.generated_tokens = read_ids("generated_tokens");
  r.k = field_as<std::size_t>(j, "k", "");
  if (r.k < 1) schema("/k", "must be >= 1");
  const std::size_t width = std::min(r.k, V);

  const auto& layers = require_array(j, "layers", "");
  std::set<std::size_t> seen_layers;
  std::optional<std::size_t> steps;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const std::string lp = "/layers/" + std::to_string(li);
    LensLayerBlock lb;
    lb.layer = field_as<std::size_t>(layers[li], "layer", lp);
    if (lb.layer >= r.model.n_layers) schema(lp + "/layer", "layer out of range");
    if (!seen_layers.insert(lb.layer).second) schema(lp + "/layer", "duplicate layer");
    const auto& types = require_array(layers[li], "types", lp);
    std::set<ActivationType> seen_types;
    for (std::size_t ti = 0; ti < types.size(); ++ti) {
      const std::string tp = lp + "/types/" + std::to_string(ti);
      LensTypeBlock tb;
      try {
        tb.type = parse_activation_type(field_as<std::string>(types[ti], "type", tp));
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kSchema) throw;
        schema(tp + "/type", e.what());
      }
      if (!seen_types.insert(tb.type).second) schema(tp + "/type", "duplicate type");
      const auto& positions = require_array(types[ti], "positions", tp);
      if (!steps) steps = positions.size();
      if (positions.size() != *steps) {
        schema(tp + "/positions", "expected " + std::to_string(*steps) + " positions");
      }
      for (std::size_t pi = 0; pi < positions.size(); ++pi) {
        const std::string pp = tp + "/positions/" + std::to_string(pi);
        LensPosition pos;
        pos.t = field_as<std::size_t>(positions[pi], "t", pp);
        if (pos.t != pi) schema(pp + "/t", "positions must be 0..T-1 in order");
        const auto& topk = require_array(positions[pi], "topk", pp);
        if (topk.size() != width) {
          schema(pp + "/topk", "expected " + std::to_string(width) + " entries");
        }
        for (std::size_t ei = 0; ei < topk.size(); ++ei) {
          const std::string ep = pp + "/topk/" + std::to_string(ei);
          TopKEntry e;
          e.id = field_as<TokenId>(topk[ei], "id", ep);
          if (e.id < 0 || static_cast<std::size_t>(e.id) >= V) schema(ep + "/id", "token id out of range");
          e.text = field_as<std::string>(topk[ei], "text", ep);
          const double p = field_as<double>(topk[ei], "p", ep);
          if (!(p >= 0.0 && p <= 1.0)) schema(ep + "/p", "probability outside [0, 1]");
          e.p = static_cast<float>(p);
          if (!pos.topk.empty() && e.p > pos.topk.back().p) {
            schema(ep + "/p", "top-k entries not in descending order");
          }
          pos.topk.push_back(std::move(e));
        }
        tb.positions.push_back(std::move(pos));
      }
      lb.types.push_back(std::move(tb));
    }
    r.layers.push_back(std::move(lb));
  }
  return r;
}

void save_report(const LensReport& report, const std::filesystem::path& path) {
  write_text_file(path, report_to_json(report).dump(2) + "\n");
}

LensReport load_report(const std::filesystem::path& path) {
  return report_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Heatmap

std::size_t heatmap_bucket(float p) {
  const float clamped = std::clamp(p, 0.0f, 1.0f);
  return std::min<std::size_t>(4, static_cast<std::size_t>(clamped * 5.0f));
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (unsigned char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default:
        if (ch < 0x20 || ch >= 0x7f) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04X", ch);
          out += buf;
        } else {
          out.push_back(static_cast<char>(ch));
        }
    }
  }
  return out;
}

}  // namespace

std::string heatmap_svg(const LensReport& report,
                        const HeatmapOptions& options) {
  struct Column {
    ActivationType type;
    std::size_t t;
  };
  std::vector<const LensLayerBlock*> rows;
  for (const auto& lb : report.layers) {
    if (options.layer_lo && lb.layer < *options.layer_lo) continue;
    if (options.layer_hi && lb.layer > *options.layer_hi) continue;
    rows.push_back(&lb);
  }
  std::sort(rows.begin(), rows.end(),
            [](auto* a, auto* b) { return a->layer > b->layer; });

  std::vector<Column> cols;
  if (!rows.empty()) {
    for (const auto& tb : rows.front()->types) {
      const bool keep = options.types.empty() ||
                        std::find(options.types.begin(), options.types.end(),
                                  tb.type) != options.types.end();
      if (!keep) continue;
      for (std::size_t t = 0; t < tb.positions.size(); ++t) cols.push_back({tb.type, t});
    }
  }
  require(!rows.empty() && !cols.empty(), ErrorKind::kInvalidArgument,
          "heatmap selection is empty");

  const int label_w = 60, header_h = 36, cell_w = 96, line_h = 13;
  const int cell_h = static_cast<int>(std::min(report.k, report.model.vocab_size)) * line_h + 8;
  const int width = label_w + cell_w * static_cast<int>(cols.size());
  const int height = header_h + cell_h * static_cast<int>(rows.size());

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' ' << height
     << "\">\n"
     << "<style>text{font-family:monospace;font-size:11px}</style>\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
     << "\" fill=\"#ffffff\"/>\n";
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const int x = label_w + cell_w * static_cast<int>(c);
    os << "<text x=\"" << x + 4 << "\" y=\"14\">"
       << activation_type_name(cols[c].type) << "</text>\n"
       << "<text x=\"" << x + 4 << "\" y=\"28\">t=" << cols[c].t << "</text>\n";
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = header_h + cell_h * static_cast<int>(r);
    os << "<text x=\"4\" y=\"" << y + cell_h / 2 + 4 << "\">L" << rows[r]->layer
       << "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& cell = report.at(rows[r]->layer, cols[c].type, cols[c].t);
      const float p = cell.topk.empty() ? 0.0f : cell.topk.front().p;
      const std::size_t bucket = heatmap_bucket(p);
      const int x = label_w + cell_w * static_cast<int>(c);
      os << "<g><title>";
      for (std::size_t i = 0; i < cell.topk.size(); ++i) {
        if (i) os << ' ';
        os << xml_escape(cell.topk[i].text) << '=' << cell.topk[i].p;
      }
      os << "</title><rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w
         << "\" height=\"" << cell_h << "\" fill=\"" << kHeatmapPalette[bucket]
         << "\" stroke=\"#999999\" data-bucket=\"" << bucket << "\"/>";
      const char* ink = bucket >= 3 ? "#ffffff" : "#000000";
      for (std::size_t i = 0; i < cell.topk.size(); ++i) {
        os << "<text x=\"" << x + 4 << "\" y=\"" << y + 13 + line_h * static_cast<int>(i)
           << "\" fill=\"" << ink << "\">" << xml_escape(cell.topk[i].text) << "</text>";
      }
      os << "</g>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------

EagerProjector::EagerProjector(const Model& model, CaptureConfig capture)
    : model_(model), capture_(std::move(capture)) {}

void EagerProjector::on_activation(const ActivationSite& site,
                                   std::span<float> h) {
  if (!capture_.wants(site.layer, site.type)) return;
  const auto logits = project_row(h, model_);
  auto& rows = rows_[{site.layer, site.type}];
  rows.insert(rows.end(), logits.begin(), logits.end());
}

Tensor EagerProjector::logits(std::size_t layer, ActivationType type) const {
  auto it = rows_.find({layer, type});
  require(it != rows_.end(), ErrorKind::kInvalidArgument,
          "no eager projections for this (layer, type)");
  const std::size_t V = model_.config.vocab_size;
  return Tensor(Shape{it->second.size() / V, V}, it->second);
}

}  // namespace tplens
