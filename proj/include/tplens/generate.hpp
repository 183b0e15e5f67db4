#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tplens/hooks.hpp"
#include "tplens/model.hpp"

namespace tplens {

/// A KV-cached single-token executor. Implemented by the dense model and by
/// the tensor-parallel engine.
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual const Model& model() const = 0;
  // Number of positions already in the cache.
  virtual std::size_t position() const = 0;
  virtual void reset() = 0;
  // Feeds one token at position(); returns next-token logits, valid until the
  // next call.
  virtual std::span<const float> step(TokenId token, HookList hooks) = 0;
};

class DenseDecoder final : public Decoder {
 public:
  explicit DenseDecoder(const Model& model)
      : model_(model), cache_(model.config), ws_(model.config) {}

  const Model& model() const override { return model_; }
  std::size_t position() const override { return cache_.length(); }
  void reset() override { cache_.reset(); }
  std::span<const float> step(TokenId token, HookList hooks) override {
    return forward_step(model_, cache_, token, hooks, ws_);
  }

 private:
  const Model& model_;
  KvCache cache_;
  StepWorkspace ws_;
};

struct DecodeHooks {
  // Fire on every forward step, prompt included (steering).
  std::vector<LayerHook*> interventions;
  // Fire only on steps inside the capture window (recording).
  std::vector<LayerHook*> observers;
};

struct GenerateOptions {
  // Extend the observer window from the last prompt token to all of them.
  bool capture_prefill = false;
};

struct GenerationResult {
  std::vector<TokenId> tokens;        // the T generated tokens
  std::vector<float> answer_logits;   // logits that produced tokens[0]
  std::size_t forward_calls = 0;      // cached single-token steps executed
  std::size_t decode_steps = 0;       // steps whose logits chose a token
};

// Position of the first observed slice for a prompt of `prompt_len` tokens.
std::size_t capture_origin(std::size_t prompt_len, const GenerateOptions& o);

/// Greedy (argmax) decoding of `budget` tokens after `prompt`. Resets the
/// decoder first. Step t (0-based) observes the slice whose logits choose
/// token t; the final generated token is never fed back.
GenerationResult greedy_decode(Decoder& decoder,
                               std::span<const TokenId> prompt,
                               std::size_t budget, const DecodeHooks& hooks = {},
                               const GenerateOptions& options = {});

}  // namespace tplens
