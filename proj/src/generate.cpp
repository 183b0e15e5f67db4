#include "tplens/generate.hpp"

#include "tplens/error.hpp"

namespace tplens {

std::size_t capture_origin(std::size_t prompt_len, const GenerateOptions& o) {
  return o.capture_prefill || prompt_len == 0 ? 0 : prompt_len - 1;
}

GenerationResult greedy_decode(Decoder& decoder,
                               std::span<const TokenId> prompt,
                               std::size_t budget, const DecodeHooks& hooks,
                               const GenerateOptions& options) {
  const auto& config = decoder.model().config;
  require(!prompt.empty(), ErrorKind::kInvalidArgument,
          "prompt must contain at least one token");
  require(prompt.size() + budget <= config.max_seq, ErrorKind::kInvalidArgument,
          "prompt (" + std::to_string(prompt.size()) + ") + budget (" +
              std::to_string(budget) + ") exceeds context limit " +
              std::to_string(config.max_seq));
  for (TokenId t : prompt) check_token(config, t);

  decoder.reset();
  GenerationResult result;
  if (budget == 0) return result;
  result.tokens.reserve(budget);

  std::vector<LayerHook*> all = hooks.interventions;
  all.insert(all.end(), hooks.observers.begin(), hooks.observers.end());
  const HookList with_observers(all);
  const HookList interventions_only(hooks.interventions);

  const std::size_t origin = capture_origin(prompt.size(), options);
  auto run = [&](TokenId token) {
    const bool observe = decoder.position() >= origin;
    ++result.forward_calls;
    return decoder.step(token, observe ? with_observers : interventions_only);
  };

  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) run(prompt[i]);
  auto logits = run(prompt.back());
  result.answer_logits.assign(logits.begin(), logits.end());

  for (std::size_t t = 0;; ++t) {
    ++result.decode_steps;
    result.tokens.push_back(static_cast<TokenId>(argmax(logits)));
    if (t + 1 == budget) break;
    logits = run(result.tokens.back());
  }
  return result;
}

}  // namespace tplens
