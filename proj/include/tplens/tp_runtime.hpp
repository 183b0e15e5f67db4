#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "tplens/generate.hpp"
#include "tplens/model.hpp"
#include "tplens/tensor.hpp"

namespace tplens {

struct Range {
  std::size_t begin = 0, end = 0;
  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const Range&, const Range&) = default;
};

// Contiguous split of [0, n) into `parts` non-empty ranges, earlier ranges
// taking the remainder.
std::vector<Range> split_range(std::size_t n, std::size_t parts);

/// How weights are partitioned over S shards: attention heads contiguous per
/// shard, MLP gate/up column-sharded with down row-sharded to match, and the
/// LM head row-sharded over the vocabulary.
struct ShardPlan {
  std::size_t num_shards = 1;
  std::vector<Range> heads;  // head indices
  std::vector<Range> ff;     // MLP inner columns
  std::vector<Range> vocab;  // LM-head rows

  static ShardPlan make(const ModelConfig& config, std::size_t num_shards);
  void validate(const ModelConfig& config) const;
};

struct ShardLayerWeights {
  Tensor attn_norm;       // replicated [d]
  Tensor wq, wk, wv;      // [heads*dh x d], this shard's head rows
  Tensor wo;              // [d x heads*dh], matching columns
  Tensor mlp_norm;        // replicated [d]
  Tensor w_gate, w_up;    // [ff x d]
  Tensor w_down;          // [d x ff]
};

/// Everything one shard may touch.
struct ShardWeights {
  std::size_t shard = 0;
  Range heads, ff, vocab;
  Tensor embedding;  // replicated
  std::vector<ShardLayerWeights> layers;
  Tensor final_norm;  // replicated
  Tensor lm_head;     // [vocab slice x d]
  Tensor lm_bias;     // [vocab slice]
};

std::vector<ShardWeights> shard_weights(const Model& model,
                                        const ShardPlan& plan);
// Inverse of shard_weights; used to audit that the slices partition the model.
Weights reassemble_weights(const ModelConfig& config,
                           std::span<const ShardWeights> shards);

/// Elementwise sum of equal-shaped partials, accumulated in shard order.
Tensor all_reduce_sum(std::span<const Tensor> partials);
void all_reduce_sum_into(std::span<const std::span<const float>> partials,
                         std::span<float> out);
// Double-precision partials, summed in shard order and rounded once.
void all_reduce_sum_into(std::span<const std::span<const double>> partials,
                         std::span<float> out);

/// Runs one task per shard and joins. Threaded mode keeps one persistent
/// worker thread per shard; sequential mode runs shards in order on the
/// calling thread.
class ShardExecutor {
 public:
  ShardExecutor(std::size_t num_shards, bool threaded);
  ~ShardExecutor();
  ShardExecutor(const ShardExecutor&) = delete;
  ShardExecutor& operator=(const ShardExecutor&) = delete;

  std::size_t size() const noexcept { return n_; }
  bool threaded() const noexcept { return !threads_.empty(); }
  // Rethrows the first shard failure after all shards have finished.
  void run(const std::function<void(std::size_t)>& task);

 private:
  void worker_loop(std::size_t shard);

  std::size_t n_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable start_cv_, done_cv_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t generation_ = 0, pending_ = 0;
  bool stop_ = false;
  std::vector<std::exception_ptr> errors_;
};

enum class ExecMode { kThreaded, kSequential };

/// Simulated tensor-parallel decoder. Shard workers compute their heads and
/// MLP columns; partial outputs meet at an all-reduce after attention and
/// after the MLP. Hooks fire once, on the capture rank (shard 0), with the
/// full post-reduction activation.
class TpEngine final : public Decoder {
 public:
  TpEngine(const Model& model, std::size_t num_shards,
           ExecMode mode = ExecMode::kThreaded);

  const Model& model() const override { return model_; }
  std::size_t position() const override;
  void reset() override;
  std::span<const float> step(TokenId token, HookList hooks) override;

  const ShardPlan& plan() const noexcept { return plan_; }
  std::span<const ShardWeights> shards() const noexcept { return weights_; }
  std::size_t num_shards() const noexcept { return plan_.num_shards; }

  /// Batched vocabulary projection of already-normalized rows [T x d]:
  /// each shard multiplies by its LM-head slice, results gathered by vocab.
  Tensor project_normalized(const Tensor& normed);

 private:
  struct Worker {
    KvCache cache;
    std::vector<float> xn, q, k, v, attn, gate, up;
    std::vector<double> partial;  // mailbox for the all-reduce
    std::vector<float> logits;   // this shard's vocab slice
  };

  const Model& model_;
  ShardPlan plan_;
  std::vector<ShardWeights> weights_;
  std::vector<Worker> workers_;
  ShardExecutor exec_;
  std::vector<float> x_, reduced_, logits_;
  std::vector<std::span<const double>> mailboxes_;
};

}  // namespace tplens
