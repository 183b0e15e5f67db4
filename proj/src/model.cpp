#include "tplens/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "tplens/error.hpp"

namespace tplens {

std::string_view activation_type_name(ActivationType t) {
  switch (t) {
    case ActivationType::kAttnOut:
      return "attn_out";
    case ActivationType::kMlpOut:
      return "mlp_out";
    case ActivationType::kBlockOut:
      return "block_out";
  }
  return "?";
}

ActivationType parse_activation_type(std::string_view name) {
  if (name == "attn_out" || name == "attn") return ActivationType::kAttnOut;
  if (name == "mlp_out" || name == "mlp") return ActivationType::kMlpOut;
  if (name == "block_out" || name == "block") return ActivationType::kBlockOut;
  fail(ErrorKind::kInvalidArgument,
       "unknown activation type '" + std::string(name) + "'");
}

std::vector<ActivationType> parse_activation_types(std::string_view list) {
  std::array<bool, 3> seen{};
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = list.find(',', start);
    const std::size_t end = comma == std::string_view::npos ? list.size() : comma;
    const auto t = parse_activation_type(list.substr(start, end - start));
    require(!seen[static_cast<int>(t)], ErrorKind::kInvalidArgument,
            "duplicate activation type in '" + std::string(list) + "'");
    seen[static_cast<int>(t)] = true;
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  std::vector<ActivationType> out;
  for (auto t : kAllActivationTypes) {
    if (seen[static_cast<int>(t)]) out.push_back(t);
  }
  return out;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::kInvalidArgument, m); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
    bad("model dimensions must be positive");
  if (d_model % n_heads != 0)
    bad("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
        std::to_string(n_heads));
  if (d_head() % 2 != 0) bad("head dimension must be even for rotary embedding");
  if (vocab_size < 2) bad("vocab_size must be >= 2");
  if (max_seq < 1) bad("max_seq must be >= 1");
  if (!(rope_theta > 0.0f)) bad("rope_theta must be positive");
  if (!(norm_eps > 0.0f)) bad("norm_eps must be positive");
}

std::size_t default_ff_width(std::size_t d_model) {
  const std::size_t raw = (8 * d_model + 2) / 3;
  return (raw + 7) / 8 * 8;
}

namespace {

template <typename W, typename Fn>
void visit_tensors(W& w, Fn&& fn) {
  fn(std::string("embedding"), w.embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "attn_norm", L.attn_norm);
    fn(p + "wq", L.wq);
    fn(p + "wk", L.wk);
    fn(p + "wv", L.wv);
    fn(p + "wo", L.wo);
    fn(p + "mlp_norm", L.mlp_norm);
    fn(p + "w_gate", L.w_gate);
    fn(p + "w_up", L.w_up);
    fn(p + "w_down", L.w_down);
  }
  fn(std::string("final_norm"), w.final_norm);
  fn(std::string("lm_head"), w.lm_head);
  fn(std::string("lm_bias"), w.lm_bias);
}

}  // namespace

void for_each_tensor(
    Weights& w, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_tensors(w, fn);
}

void for_each_tensor(
    const Weights& w,
    const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_tensors(w, fn);
}

std::vector<std::pair<std::string, Shape>> weight_shape_table(
    const ModelConfig& c) {
  const std::size_t d = c.d_model, V = c.vocab_size, F = c.d_ff;
  std::vector<std::pair<std::string, Shape>> t;
  t.emplace_back("embedding", Shape{V, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    t.emplace_back(p + "attn_norm", Shape{d});
    t.emplace_back(p + "wq", Shape{d, d});
    t.emplace_back(p + "wk", Shape{d, d});
    t.emplace_back(p + "wv", Shape{d, d});
    t.emplace_back(p + "wo", Shape{d, d});
    t.emplace_back(p + "mlp_norm", Shape{d});
    t.emplace_back(p + "w_gate", Shape{F, d});
    t.emplace_back(p + "w_up", Shape{F, d});
    t.emplace_back(p + "w_down", Shape{d, F});
  }
  t.emplace_back("final_norm", Shape{d});
  t.emplace_back("lm_head", Shape{V, d});
  t.emplace_back("lm_bias", Shape{V});
  return t;
}

std::size_t parameter_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (const auto& [name, shape] : weight_shape_table(c)) n += shape_elements(shape);
  return n;
}

Model init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m{config, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(
      0.0f, 1.0f / std::sqrt(static_cast<float>(config.d_model)));

  m.weights.layers.resize(config.n_layers);
  const auto table = weight_shape_table(config);
  std::size_t i = 0;
  for_each_tensor(m.weights, [&](const std::string& name, Tensor& t) {
    const Shape& shape = table[i++].second;
    t = Tensor(shape);
    const bool is_gain = name.ends_with("_norm");
    if (is_gain) {
      for (float& v : t.data()) v = 1.0f;
    } else if (name != "lm_bias") {
      for (float& v : t.data()) v = gauss(rng);
    }
  });
  return m;
}

std::uint64_t weights_checksum(const Weights& w) {
  std::uint64_t h = 1469598103934665603ull;
  for_each_tensor(w, [&](const std::string&, const Tensor& t) {
    for (float v : t.data()) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  });
  return h;
}

void check_token(const ModelConfig& config, TokenId token) {
  require(token >= 0 && static_cast<std::size_t>(token) < config.vocab_size,
          ErrorKind::kInvalidArgument,
          "token id " + std::to_string(token) + " outside vocabulary of " +
              std::to_string(config.vocab_size));
}

// ---------------------------------------------------------------------------
// KV cache

KvCache::KvCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head,
                 std::size_t max_seq)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      d_head_(d_head),
      max_seq_(max_seq),
      keys_(n_layers * n_heads * max_seq * d_head),
      values_(keys_.size()) {}

std::size_t KvCache::offset(std::size_t layer, std::size_t head,
                            std::size_t pos) const {
  return ((layer * n_heads_ + head) * max_seq_ + pos) * d_head_;
}

std::span<float> KvCache::key(std::size_t layer, std::size_t head,
                              std::size_t pos) {
  return {keys_.data() + offset(layer, head, pos), d_head_};
}
std::span<const float> KvCache::key(std::size_t layer, std::size_t head,
                                    std::size_t pos) const {
  return {keys_.data() + offset(layer, head, pos), d_head_};
}
std::span<float> KvCache::value(std::size_t layer, std::size_t head,
                                std::size_t pos) {
  return {values_.data() + offset(layer, head, pos), d_head_};
}
std::span<const float> KvCache::value(std::size_t layer, std::size_t head,
                                      std::size_t pos) const {
  return {values_.data() + offset(layer, head, pos), d_head_};
}

void KvCache::advance() {
  require(length_ < max_seq_, ErrorKind::kState, "KV cache overflow");
  ++length_;
}

void apply_rope(std::span<float> heads, std::size_t n_heads,
                std::size_t d_head, std::size_t pos, float theta) {
  for (std::size_t i = 0; i < d_head; i += 2) {
    const float freq =
        std::pow(theta, -static_cast<float>(i) / static_cast<float>(d_head));
    const float angle = static_cast<float>(pos) * freq;
    const float c = std::cos(angle), s = std::sin(angle);
    for (std::size_t h = 0; h < n_heads; ++h) {
      float* p = heads.data() + h * d_head + i;
      const float a = p[0], b = p[1];
      p[0] = a * c - b * s;
      p[1] = a * s + b * c;
    }
  }
}

void attend_cached(std::span<const float> q, const KvCache& cache,
                   std::size_t layer, std::size_t len, std::span<float> out) {
  const std::size_t H = cache.n_heads(), dh = cache.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> scores(len);
  for (std::size_t h = 0; h < H; ++h) {
    auto qh = q.subspan(h * dh, dh);
    for (std::size_t j = 0; j < len; ++j) {
      scores[j] = dot(qh, cache.key(layer, h, j)) * scale;
    }
    const auto probs = softmax(scores);
    auto oh = out.subspan(h * dh, dh);
    std::fill(oh.begin(), oh.end(), 0.0f);
    for (std::size_t j = 0; j < len; ++j) {
      auto vj = cache.value(layer, h, j);
      for (std::size_t e = 0; e < dh; ++e) oh[e] += probs[j] * vj[e];
    }
  }
}

// ---------------------------------------------------------------------------
// Dense cached step

StepWorkspace::StepWorkspace(const ModelConfig& c)
    : x(c.d_model),
      xn(c.d_model),
      q(c.d_model),
      k(c.d_model),
      v(c.d_model),
      attn(c.d_model),
      attn_out(c.d_model),
      gate(c.d_ff),
      up(c.d_ff),
      mlp_out(c.d_model),
      logits(c.vocab_size) {}

void project_hidden(const Model& model, std::span<const float> h,
                    std::span<float> normed_scratch, std::span<float> logits) {
  const auto& w = model.weights;
  rms_norm_into(h, w.final_norm.data(), model.config.norm_eps, normed_scratch);
  linear_into(normed_scratch, w.lm_head, logits);
  add_into(logits, w.lm_bias.data());
}

std::span<const float> forward_step(const Model& model, KvCache& cache,
                                    TokenId token, HookList hooks,
                                    StepWorkspace& ws) {
  const auto& c = model.config;
  const auto& w = model.weights;
  check_token(c, token);
  require(cache.length() < c.max_seq, ErrorKind::kState,
          "KV cache overflow: context limit " + std::to_string(c.max_seq));
  const std::size_t pos = cache.length();
  const std::size_t H = c.n_heads, dh = c.d_head();

  auto emb = w.embedding.row(static_cast<std::size_t>(token));
  std::copy(emb.begin(), emb.end(), ws.x.begin());

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    rms_norm_into(ws.x, L.attn_norm.data(), c.norm_eps, ws.xn);
    linear_into(ws.xn, L.wq, ws.q);
    linear_into(ws.xn, L.wk, ws.k);
    linear_into(ws.xn, L.wv, ws.v);
    apply_rope(ws.q, H, dh, pos, c.rope_theta);
    apply_rope(ws.k, H, dh, pos, c.rope_theta);
    for (std::size_t h = 0; h < H; ++h) {
      std::copy_n(ws.k.begin() + h * dh, dh, cache.key(l, h, pos).begin());
      std::copy_n(ws.v.begin() + h * dh, dh, cache.value(l, h, pos).begin());
    }
    attend_cached(ws.q, cache, l, pos + 1, ws.attn);
    linear_wide_into(ws.attn, L.wo, ws.attn_out);
    fire_hooks(hooks, {l, ActivationType::kAttnOut, pos}, ws.attn_out);
    add_into(ws.x, ws.attn_out);

    rms_norm_into(ws.x, L.mlp_norm.data(), c.norm_eps, ws.xn);
    linear_into(ws.xn, L.w_gate, ws.gate);
    linear_into(ws.xn, L.w_up, ws.up);
    for (std::size_t i = 0; i < c.d_ff; ++i) ws.gate[i] = silu(ws.gate[i]) * ws.up[i];
    linear_wide_into(ws.gate, L.w_down, ws.mlp_out);
    fire_hooks(hooks, {l, ActivationType::kMlpOut, pos}, ws.mlp_out);
    add_into(ws.x, ws.mlp_out);
    fire_hooks(hooks, {l, ActivationType::kBlockOut, pos}, ws.x);
    check_finite(ws.x, "layer " + std::to_string(l) + " activation");
  }
  cache.advance();

  project_hidden(model, ws.x, ws.xn, ws.logits);
  check_finite(ws.logits, "logits");
  return ws.logits;
}

std::vector<float> forward_step(const Model& model, KvCache& cache,
                                TokenId token, HookList hooks) {
  StepWorkspace ws(model.config);
  auto logits = forward_step(model, cache, token, hooks, ws);
  return {logits.begin(), logits.end()};
}

// ---------------------------------------------------------------------------
// Uncached full-sequence forward

FullForward forward_full(const Model& model, std::span<const TokenId> tokens,
                         const FullForwardOptions& options) {
  const auto& c = model.config;
  const auto& w = model.weights;
  const std::size_t n = tokens.size(), d = c.d_model, H = c.n_heads,
                    dh = c.d_head();
  require(n >= 1, ErrorKind::kInvalidArgument, "forward_full: empty sequence");
  require(n <= c.max_seq, ErrorKind::kState,
          "sequence of " + std::to_string(n) + " exceeds context limit");

  Tensor x(Shape{n, d});
  for (std::size_t t = 0; t < n; ++t) {
    check_token(c, tokens[t]);
    auto e = w.embedding.row(static_cast<std::size_t>(tokens[t]));
    std::copy(e.begin(), e.end(), x.row(t).begin());
  }

  FullForward result;
  if (options.keep_activations) result.activations.resize(c.n_layers);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    Tensor xn = rms_norm(x, L.attn_norm, c.norm_eps);
    Tensor q = linear(xn, L.wq), k = linear(xn, L.wk), v = linear(xn, L.wv);
    for (std::size_t t = 0; t < n; ++t) {
      apply_rope(q.row(t), H, dh, t, c.rope_theta);
      apply_rope(k.row(t), H, dh, t, c.rope_theta);
    }
    Tensor mixed(Shape{n, d});
    std::vector<float> scores;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        scores.assign(t + 1, 0.0f);
        auto qh = q.row(t).subspan(h * dh, dh);
        for (std::size_t j = 0; j <= t; ++j) {
          scores[j] = dot(qh, k.row(j).subspan(h * dh, dh)) * scale;
        }
        const auto probs = softmax(scores);
        auto out = mixed.row(t).subspan(h * dh, dh);
        for (std::size_t j = 0; j <= t; ++j) {
          auto vj = v.row(j).subspan(h * dh, dh);
          for (std::size_t e = 0; e < dh; ++e) out[e] += probs[j] * vj[e];
        }
      }
    }
    Tensor attn_out = linear_wide(mixed, L.wo);
    add_into(x.data(), attn_out.data());

    Tensor hn = rms_norm(x, L.mlp_norm, c.norm_eps);
    Tensor gate = linear(hn, L.w_gate), up = linear(hn, L.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = silu(gate[i]) * up[i];
    Tensor mlp_out = linear_wide(gate, L.w_down);
    add_into(x.data(), mlp_out.data());
    check_finite(x.data(), "layer " + std::to_string(l) + " activation");

    if (options.keep_activations) {
      result.activations[l] = {std::move(attn_out), std::move(mlp_out), x};
    }
  }

  const std::size_t first = options.last_logits_only ? n - 1 : 0;
  result.logits = Tensor(Shape{n - first, c.vocab_size});
  std::vector<float> normed(d);
  for (std::size_t t = first; t < n; ++t) {
    project_hidden(model, x.row(t), normed, result.logits.row(t - first));
  }
  check_finite(result.logits.data(), "logits");
  return result;
}

}  // namespace tplens
