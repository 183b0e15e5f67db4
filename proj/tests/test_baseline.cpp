#include <doctest.h>

#include "helpers.hpp"
#include "tplens/baseline.hpp"
#include "tplens/error.hpp"
#include "tplens/tokenizer.hpp"

using namespace tplens;
using tplens::testing::toy_model;

namespace {

void check_reports_agree(const LensReport& a, const LensReport& b) {
  REQUIRE(a.layers.size() == b.layers.size());
  CHECK(a.generated_tokens == b.generated_tokens);
  for (std::size_t li = 0; li < a.layers.size(); ++li) {
    CHECK(a.layers[li].layer == b.layers[li].layer);
    REQUIRE(a.layers[li].types.size() == b.layers[li].types.size());
    for (std::size_t ti = 0; ti < a.layers[li].types.size(); ++ti) {
      const auto& pa = a.layers[li].types[ti].positions;
      const auto& pb = b.layers[li].types[ti].positions;
      REQUIRE(pa.size() == pb.size());
      for (std::size_t s = 0; s < pa.size(); ++s) {
        REQUIRE(pa[s].topk.size() == pb[s].topk.size());
        for (std::size_t j = 0; j < pa[s].topk.size(); ++j) {
          CHECK(pa[s].topk[j].id == pb[s].topk[j].id);
          CHECK(std::abs(pa[s].topk[j].p - pb[s].topk[j].p) <= 1e-4f);
        }
      }
    }
  }
}

}  // namespace

TEST_SUITE("baseline") {

TEST_CASE("baseline report equals the single-pass report") {
  const Model m = toy_model(32, 4, 4, 61);
  const auto prompt = encode_bytes("compare");
  const std::size_t T = 12;
  const CaptureConfig cap = CaptureConfig::all(m.config);

  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = cap;
  const Trace t = run_trace(dec, prompt, T, opts);
  const LensReport ours = build_report(t, m, {5});

  const auto base = baseline_lens_generate(m, prompt, T, {cap.layers, cap.types, 5, false});
  CHECK(base.tokens == t.generated);
  check_reports_agree(base.report, ours);
  CHECK(base.full_prefix_forwards == T);
  CHECK(base.cached_steps == 0);
}

TEST_CASE("forward and projection counters") {
  const Model m = toy_model(16, 3, 2, 2);
  const auto prompt = encode_bytes("count");
  const std::vector<std::size_t> layers{0, 2};
  const std::vector<ActivationType> types{ActivationType::kBlockOut};
  for (std::size_t T : {1u, 5u, 9u}) {
    const auto once = baseline_lens_generate(m, prompt, T, {layers, types, 3, false});
    CHECK(once.full_prefix_forwards == T);
    const auto harsh = baseline_lens_generate(m, prompt, T, {layers, types, 3, true});
    CHECK(harsh.full_prefix_forwards == T * layers.size());
    CHECK(harsh.tokens == once.tokens);
    CHECK(once.vocab_projections == T * layers.size() * types.size());
  }
  DenseDecoder dec(m);
  CHECK(greedy_decode(dec, prompt, 9).forward_calls == prompt.size() + 8);
}

TEST_CASE("baseline allocates vocabulary buffers while decoding") {
  const Model m = toy_model(16, 2, 2, 3);
  const auto prompt = encode_bytes("audit");
  const CaptureConfig cap = CaptureConfig::all(m.config);
  const auto before = audit::snapshot();
  const auto base = baseline_lens_generate(m, prompt, 4, {cap.layers, cap.types, 2, false});
  const auto after = audit::snapshot();
  CHECK(after.vocab_buffers - before.vocab_buffers == 4 * 2 * 3);
  CHECK(base.peak_projection_elements == m.config.vocab_size);
}

TEST_CASE("baseline argument checks") {
  const Model m = toy_model(16, 2, 2);
  const auto prompt = encode_bytes("x");
  CHECK_THROWS_AS(baseline_lens_generate(m, {}, 3, {{0}, {ActivationType::kBlockOut}, 1, false}),
                  Error);
  CHECK_THROWS_AS(baseline_lens_generate(m, prompt, 3, {{5}, {ActivationType::kBlockOut}, 1, false}),
                  Error);
  CHECK_THROWS_AS(baseline_lens_generate(m, prompt, 3, {{0}, {ActivationType::kBlockOut}, 0, false}),
                  Error);
  CHECK(baseline_lens_generate(m, prompt, 0, {{0}, {ActivationType::kBlockOut}, 1, false})
            .tokens.empty());
}

TEST_CASE("timing summary") {
  const auto s = summarize_runs({1.0, 2.0, 3.0}, 30);
  CHECK(s.mean_s == 2.0);
  CHECK(s.std_s == doctest::Approx(1.0));
  CHECK(s.tok_s == doctest::Approx(15.0));
  CHECK(summarize_runs({2.0, 2.0, 2.0}, 1).std_s == 0.0);
}

TEST_CASE("bench report shape") {
  const Model m = toy_model(16, 2, 2, 1);
  BenchOptions o;
  o.budgets = {2, 4};
  o.repeats = 3;
  const auto r = bench_compare(m, encode_bytes("b"), o);
  REQUIRE(r.entries.size() == 2);
  for (const auto& e : r.entries) {
    CHECK(e.baseline.runs_s.size() == 3);
    CHECK(e.ours.runs_s.size() == 3);
    CHECK(e.baseline.std_s >= 0.0);
    CHECK(e.ours.std_s >= 0.0);
    CHECK(e.speedup > 0.0);
  }
  const auto j = bench_to_json(r);
  CHECK(j["budgets"][1]["T"] == 4);
  CHECK(j["budgets"][0]["baseline"].contains("mean_s"));
  CHECK(j["budgets"][0]["ours"].contains("tok_s"));
  CHECK(j["host"].contains("hardware_threads"));
  CHECK(bench_to_csv(r).find("\n4,") != std::string::npos);
  o.repeats = 2;
  CHECK_THROWS_AS(bench_compare(m, encode_bytes("b"), o), Error);
}

}  // TEST_SUITE
