#include "tplens/tp_runtime.hpp"

#include <algorithm>

#include "tplens/error.hpp"

namespace tplens {

std::vector<Range> split_range(std::size_t n, std::size_t parts) {
  require(parts >= 1 && n >= parts, ErrorKind::kInvalidArgument,
          "cannot split " + std::to_string(n) + " into " +
              std::to_string(parts) + " non-empty parts");
  std::vector<Range> out;
  const std::size_t base = n / parts, extra = n % parts;
  std::size_t at = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out.push_back({at, at + len});
    at += len;
  }
  return out;
}

ShardPlan ShardPlan::make(const ModelConfig& config, std::size_t num_shards) {
  require(num_shards >= 1, ErrorKind::kInvalidArgument,
          "shard count must be >= 1");
  require(config.n_heads % num_shards == 0, ErrorKind::kInvalidArgument,
          "shard count " + std::to_string(num_shards) +
              " does not divide n_heads " + std::to_string(config.n_heads));
  ShardPlan plan;
  plan.num_shards = num_shards;
  plan.heads = split_range(config.n_heads, num_shards);
  plan.ff = split_range(config.d_ff, num_shards);
  plan.vocab = split_range(config.vocab_size, num_shards);
  return plan;
}

void ShardPlan::validate(const ModelConfig& config) const {
  auto partitions = [](const std::vector<Range>& rs, std::size_t n,
                       std::size_t s) {
    if (rs.size() != s) return false;
    std::size_t at = 0;
    for (const auto& r : rs) {
      if (r.begin != at || r.size() == 0) return false;
      at = r.end;
    }
    return at == n;
  };
  require(num_shards >= 1 && config.n_heads % num_shards == 0,
          ErrorKind::kInvalidArgument, "shard count must divide n_heads");
  require(partitions(heads, config.n_heads, num_shards) &&
              partitions(ff, config.d_ff, num_shards) &&
              partitions(vocab, config.vocab_size, num_shards),
          ErrorKind::kInvalidArgument,
          "shard plan ranges do not partition the model");
  for (const auto& r : heads) {
    require(r.size() == config.n_heads / num_shards,
            ErrorKind::kInvalidArgument, "uneven head assignment");
  }
}

namespace {

// Rows [r.begin, r.end) of a 2-D tensor.
Tensor slice_rows(const Tensor& t, Range r) {
  const std::size_t cols = t.dim(1);
  std::vector<float> data(t.data().begin() + r.begin * cols,
                          t.data().begin() + r.end * cols);
  return Tensor(Shape{r.size(), cols}, std::move(data));
}

Tensor slice_cols(const Tensor& t, Range c) {
  const std::size_t rows = t.dim(0);
  Tensor out(Shape{rows, c.size()});
  for (std::size_t i = 0; i < rows; ++i) {
    auto src = t.row(i).subspan(c.begin, c.size());
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Tensor slice_vec(const Tensor& t, Range r) {
  return Tensor::from_vector(
      std::vector<float>(t.data().begin() + r.begin, t.data().begin() + r.end));
}

}  // namespace

std::vector<ShardWeights> shard_weights(const Model& model,
                                        const ShardPlan& plan) {
  const auto& c = model.config;
  plan.validate(c);
  const std::size_t dh = c.d_head();
  std::vector<ShardWeights> shards(plan.num_shards);
  for (std::size_t s = 0; s < plan.num_shards; ++s) {
    auto& sw = shards[s];
    sw.shard = s;
    sw.heads = plan.heads[s];
    sw.ff = plan.ff[s];
    sw.vocab = plan.vocab[s];
    const Range qkv{sw.heads.begin * dh, sw.heads.end * dh};
    sw.embedding = model.weights.embedding;
    for (const auto& L : model.weights.layers) {
      ShardLayerWeights lw;
      lw.attn_norm = L.attn_norm;
      lw.wq = slice_rows(L.wq, qkv);
      lw.wk = slice_rows(L.wk, qkv);
      lw.wv = slice_rows(L.wv, qkv);
      lw.wo = slice_cols(L.wo, qkv);
      lw.mlp_norm = L.mlp_norm;
      lw.w_gate = slice_rows(L.w_gate, sw.ff);
      lw.w_up = slice_rows(L.w_up, sw.ff);
      lw.w_down = slice_cols(L.w_down, sw.ff);
      sw.layers.push_back(std::move(lw));
    }
    sw.final_norm = model.weights.final_norm;
    sw.lm_head = slice_rows(model.weights.lm_head, sw.vocab);
    sw.lm_bias = slice_vec(model.weights.lm_bias, sw.vocab);
  }
  return shards;
}

Weights reassemble_weights(const ModelConfig& c,
                           std::span<const ShardWeights> shards) {
  require(!shards.empty(), ErrorKind::kInvalidArgument, "no shards");
  const std::size_t d = c.d_model, dh = c.d_head();
  Weights w;
  w.embedding = shards[0].embedding;
  w.final_norm = shards[0].final_norm;
  w.lm_head = Tensor(Shape{c.vocab_size, d});
  w.lm_bias = Tensor(Shape{c.vocab_size});
  w.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto& L = w.layers[l];
    L.attn_norm = shards[0].layers[l].attn_norm;
    L.mlp_norm = shards[0].layers[l].mlp_norm;
    L.wq = Tensor(Shape{d, d});
    L.wk = Tensor(Shape{d, d});
    L.wv = Tensor(Shape{d, d});
    L.wo = Tensor(Shape{d, d});
    L.w_gate = Tensor(Shape{c.d_ff, d});
    L.w_up = Tensor(Shape{c.d_ff, d});
    L.w_down = Tensor(Shape{d, c.d_ff});
  }
  auto put_rows = [](Tensor& dst, const Tensor& src, std::size_t first_row) {
    std::copy(src.data().begin(), src.data().end(),
              dst.data().begin() + first_row * dst.dim(1));
  };
  auto put_cols = [](Tensor& dst, const Tensor& src, std::size_t first_col) {
    for (std::size_t i = 0; i < dst.dim(0); ++i) {
      auto r = src.row(i);
      std::copy(r.begin(), r.end(), dst.row(i).begin() + first_col);
    }
  };
  for (const auto& sw : shards) {
    const std::size_t q0 = sw.heads.begin * dh;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      auto& L = w.layers[l];
      const auto& S = sw.layers[l];
      put_rows(L.wq, S.wq, q0);
      put_rows(L.wk, S.wk, q0);
      put_rows(L.wv, S.wv, q0);
      put_cols(L.wo, S.wo, q0);
      put_rows(L.w_gate, S.w_gate, sw.ff.begin);
      put_rows(L.w_up, S.w_up, sw.ff.begin);
      put_cols(L.w_down, S.w_down, sw.ff.begin);
    }
    put_rows(w.lm_head, sw.lm_head, sw.vocab.begin);
    std::copy(sw.lm_bias.data().begin(), sw.lm_bias.data().end(),
              w.lm_bias.data().begin() + sw.vocab.begin);
  }
  return w;
}

Tensor all_reduce_sum(std::span<const Tensor> partials) {
  require(!partials.empty(), ErrorKind::kInvalidArgument,
          "all_reduce_sum: no partials");
  std::vector<std::span<const float>> views;
  for (const auto& p : partials) {
    require(p.shape() == partials[0].shape(), ErrorKind::kShapeMismatch,
            "all_reduce_sum: partial shape " + shape_string(p.shape()) +
                " != " + shape_string(partials[0].shape()));
    views.push_back(p.data());
  }
  Tensor out(partials[0].shape());
  all_reduce_sum_into(views, out.data());
  return out;
}

void all_reduce_sum_into(std::span<const std::span<const float>> partials,
                         std::span<float> out) {
  for (const auto& p : partials) {
    require(p.size() == out.size(), ErrorKind::kShapeMismatch,
            "all_reduce_sum: partial length mismatch");
  }
  std::copy(partials[0].begin(), partials[0].end(), out.begin());
  for (std::size_t s = 1; s < partials.size(); ++s) add_into(out, partials[s]);
}

void all_reduce_sum_into(std::span<const std::span<const double>> partials,
                         std::span<float> out) {
  require(!partials.empty(), ErrorKind::kInvalidArgument,
          "all_reduce_sum: no partials");
  for (const auto& p : partials) {
    require(p.size() == out.size(), ErrorKind::kShapeMismatch,
            "all_reduce_sum: partial length mismatch");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = partials[0][i];
    for (std::size_t s = 1; s < partials.size(); ++s) acc += partials[s][i];
    out[i] = static_cast<float>(acc);
  }
}

// ---------------------------------------------------------------------------

ShardExecutor::ShardExecutor(std::size_t num_shards, bool threaded)
    : n_(num_shards), errors_(num_shards) {
  if (!threaded) return;
  for (std::size_t s = 0; s < n_; ++s) {
    threads_.emplace_back([this, s] { worker_loop(s); });
  }
}

ShardExecutor::~ShardExecutor() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  start_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void ShardExecutor::worker_loop(std::size_t shard) {
  std::size_t seen = 0;
  for (;;) {
    const std::function<void(std::size_t)>* task = nullptr;
    {
      std::unique_lock lock(mu_);
      start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      task = task_;
    }
    try {
      (*task)(shard);
    } catch (...) {
      errors_[shard] = std::current_exception();
    }
    {
      std::lock_guard lock(mu_);
      if (--pending_ == 0) done_cv_.notify_one();
    }
  }
}

void ShardExecutor::run(const std::function<void(std::size_t)>& task) {
  std::fill(errors_.begin(), errors_.end(), nullptr);
  if (threads_.empty()) {
    for (std::size_t s = 0; s < n_; ++s) {
      try {
        task(s);
      } catch (...) {
        errors_[s] = std::current_exception();
      }
    }
  } else {
    {
      std::lock_guard lock(mu_);
      task_ = &task;
      pending_ = n_;
      ++generation_;
    }
    start_cv_.notify_all();
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    task_ = nullptr;
  }
  for (auto& e : errors_) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------

TpEngine::TpEngine(const Model& model, std::size_t num_shards, ExecMode mode)
    : model_(model),
      plan_(ShardPlan::make(model.config, num_shards)),
      weights_(shard_weights(model, plan_)),
      exec_(num_shards, mode == ExecMode::kThreaded && num_shards > 1),
      x_(model.config.d_model),
      reduced_(model.config.d_model),
      logits_(model.config.vocab_size) {
  const auto& c = model.config;
  for (const auto& sw : weights_) {
    const std::size_t width = sw.heads.size() * c.d_head();
    Worker w;
    w.cache = KvCache(c.n_layers, sw.heads.size(), c.d_head(), c.max_seq);
    w.xn.resize(c.d_model);
    w.q.resize(width);
    w.k.resize(width);
    w.v.resize(width);
    w.attn.resize(width);
    w.gate.resize(sw.ff.size());
    w.up.resize(sw.ff.size());
    w.partial.resize(c.d_model);
    w.logits.resize(sw.vocab.size());
    workers_.push_back(std::move(w));
  }
  for (const auto& w : workers_) mailboxes_.emplace_back(w.partial);
}

std::size_t TpEngine::position() const { return workers_[0].cache.length(); }

void TpEngine::reset() {
  for (auto& w : workers_) w.cache.reset();
}

std::span<const float> TpEngine::step(TokenId token, HookList hooks) {
  const auto& c = model_.config;
  check_token(c, token);
  const std::size_t pos = workers_[0].cache.length();
  for (const auto& w : workers_) {
    require(w.cache.length() == pos, ErrorKind::kState,
            "shard desync: KV cache lengths differ across shards");
  }
  require(pos < c.max_seq, ErrorKind::kState,
          "KV cache overflow: context limit " + std::to_string(c.max_seq));
  const std::size_t dh = c.d_head();

  auto emb = model_.weights.embedding.row(static_cast<std::size_t>(token));
  std::copy(emb.begin(), emb.end(), x_.begin());

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    exec_.run([&](std::size_t s) {
      auto& w = workers_[s];
      const auto& L = weights_[s].layers[l];
      const std::size_t H = weights_[s].heads.size();
      rms_norm_into(x_, L.attn_norm.data(), c.norm_eps, w.xn);
      linear_into(w.xn, L.wq, w.q);
      linear_into(w.xn, L.wk, w.k);
      linear_into(w.xn, L.wv, w.v);
      apply_rope(w.q, H, dh, pos, c.rope_theta);
      apply_rope(w.k, H, dh, pos, c.rope_theta);
      for (std::size_t h = 0; h < H; ++h) {
        std::copy_n(w.k.begin() + h * dh, dh, w.cache.key(l, h, pos).begin());
        std::copy_n(w.v.begin() + h * dh, dh, w.cache.value(l, h, pos).begin());
      }
      attend_cached(w.q, w.cache, l, pos + 1, w.attn);
      linear_wide_into(w.attn, L.wo, w.partial);
    });
    all_reduce_sum_into(mailboxes_, reduced_);
    fire_hooks(hooks, {l, ActivationType::kAttnOut, pos}, reduced_);
    add_into(x_, reduced_);

    exec_.run([&](std::size_t s) {
      auto& w = workers_[s];
      const auto& L = weights_[s].layers[l];
      rms_norm_into(x_, L.mlp_norm.data(), c.norm_eps, w.xn);
      linear_into(w.xn, L.w_gate, w.gate);
      linear_into(w.xn, L.w_up, w.up);
      for (std::size_t i = 0; i < w.gate.size(); ++i) {
        w.gate[i] = silu(w.gate[i]) * w.up[i];
      }
      linear_wide_into(w.gate, L.w_down, w.partial);
    });
    all_reduce_sum_into(mailboxes_, reduced_);
    fire_hooks(hooks, {l, ActivationType::kMlpOut, pos}, reduced_);
    add_into(x_, reduced_);
    fire_hooks(hooks, {l, ActivationType::kBlockOut, pos}, x_);
    check_finite(x_, "layer " + std::to_string(l) + " activation");
  }
  for (auto& w : workers_) w.cache.advance();

  exec_.run([&](std::size_t s) {
    auto& w = workers_[s];
    const auto& sw = weights_[s];
    rms_norm_into(x_, sw.final_norm.data(), c.norm_eps, w.xn);
    linear_into(w.xn, sw.lm_head, w.logits);
    add_into(w.logits, sw.lm_bias.data());
  });
  for (std::size_t s = 0; s < workers_.size(); ++s) {
    std::copy(workers_[s].logits.begin(), workers_[s].logits.end(),
              logits_.begin() + weights_[s].vocab.begin);
  }
  check_finite(logits_, "logits");
  return logits_;
}

Tensor TpEngine::project_normalized(const Tensor& normed) {
  const auto& c = model_.config;
  require(normed.rank() == 2 && normed.dim(1) == c.d_model,
          ErrorKind::kShapeMismatch,
          "projection input " + shape_string(normed.shape()) +
              " does not match d_model " + std::to_string(c.d_model));
  const std::size_t T = normed.dim(0);
  std::vector<Tensor> local(workers_.size());
  exec_.run([&](std::size_t s) {
    const auto& sw = weights_[s];
    local[s] = Tensor(Shape{T, sw.vocab.size()});
    for (std::size_t t = 0; t < T; ++t) {
      linear_into(normed.row(t), sw.lm_head, local[s].row(t));
      add_into(local[s].row(t), sw.lm_bias.data());
    }
  });
  Tensor out(Shape{T, c.vocab_size});
  for (std::size_t s = 0; s < local.size(); ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      auto src = local[s].row(t);
      std::copy(src.begin(), src.end(),
                out.row(t).begin() + weights_[s].vocab.begin);
    }
  }
  check_finite(out.data(), "projected logits");
  return out;
}

}  // namespace tplens
