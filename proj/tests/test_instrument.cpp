#include <doctest.h>

#include "helpers.hpp"
#include "tplens/error.hpp"
#include "tplens/instrument.hpp"
#include "tplens/tokenizer.hpp"
#include "tplens/tp_runtime.hpp"

using namespace tplens;
using tplens::testing::TempDir;
using tplens::testing::toy_model;

TEST_SUITE("instrument") {

TEST_CASE("memory formula") {
  const auto e = memory_elements(1500, 8192, 80, 1);
  CHECK(e == 983'040'000ull);
  CHECK(memory_bytes(e, Precision::kBF16) == 1'966'080'000ull);
  CHECK(memory_bytes(memory_elements(1500, 8192, 80, 3), Precision::kBF16) ==
        5'898'240'000ull);
  CHECK(memory_elements(0, 8192, 80, 3) == 0);
  CHECK(memory_elements(4, 8, 2, 3) == 192);
}

TEST_CASE("layer specs") {
  CHECK(parse_layer_spec("all", 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(parse_layer_spec("1..3", 8) == std::vector<std::size_t>{1, 2, 3});
  CHECK(parse_layer_spec("4,0", 8) == std::vector<std::size_t>{0, 4});
  CHECK_THROWS_AS(parse_layer_spec("2..9", 8), Error);
  CHECK_THROWS_AS(parse_layer_spec("3..1", 8), Error);
  CHECK_THROWS_AS(parse_layer_spec("", 8), Error);
  CHECK(parse_activation_types("block,attn") ==
        std::vector<ActivationType>{ActivationType::kAttnOut, ActivationType::kBlockOut});
  CHECK_THROWS_AS(parse_activation_types("attn,attn_out"), Error);
}

TEST_CASE("record_slice ordering") {
  CaptureConfig cfg{{0}, {ActivationType::kBlockOut}, true};
  ActivationStore store(4, cfg);
  const std::vector<float> h{1, 2, 3, 4};
  store.record_slice(0, ActivationType::kBlockOut, h, 0);
  CHECK_THROWS_AS(store.record_slice(0, ActivationType::kBlockOut, h, 3), Error);
  CHECK_THROWS_AS(store.record_slice(0, ActivationType::kBlockOut,
                                     std::vector<float>{1, 2}, 1),
                  Error);
  const Tensor one = store.get_trajectory(0, ActivationType::kBlockOut);
  CHECK(one.shape() == Shape{1, 4});
  CHECK(one.values() == h);
  for (std::size_t t = 1; t < 5; ++t) {
    const std::vector<float> s(4, static_cast<float>(t));
    store.record_slice(0, ActivationType::kBlockOut, s, t);
  }
  const Tensor traj = store.get_trajectory(0, ActivationType::kBlockOut);
  CHECK(traj.dim(0) == 5);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto s = store.slice(0, ActivationType::kBlockOut, t);
    CHECK(std::equal(s.begin(), s.end(), traj.row(t).begin()));
  }
}

TEST_CASE("capture footprint matches the formula") {
  const Model m = toy_model(8, 2, 2, 3);
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  const Trace t = run_trace(dec, encode_bytes("ab"), 4, opts);
  CHECK(t.store.length() == 4);
  CHECK(t.store.element_count() == 192);
  CHECK(t.store.element_count() == memory_elements(4, 8, 2, 3));

  opts.capture = {{1}, {ActivationType::kMlpOut}, true};
  const Trace partial = run_trace(dec, encode_bytes("ab"), 6, opts);
  CHECK(partial.store.element_count() == memory_elements(6, 8, 1, 1));
  CHECK(partial.store.keys().size() == 1);
}

TEST_CASE("captured slices equal the uncached re-forward") {
  const Model m = toy_model(32, 3, 4, 12);
  const auto prompt = encode_bytes("trajectory");
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  const Trace t = run_trace(dec, prompt, 10, opts);
  REQUIRE(t.generated.size() == 10);

  // Slice t belongs to the position whose logits chose generated token t.
  std::vector<TokenId> seq = prompt;
  seq.insert(seq.end(), t.generated.begin(), t.generated.end() - 1);
  const FullForward full = forward_full(m, seq, {true, false});
  for (std::size_t layer = 0; layer < 3; ++layer) {
    for (ActivationType type : kAllActivationTypes) {
      const Tensor traj = t.store.get_trajectory(layer, type);
      for (std::size_t s = 0; s < 10; ++s) {
        const auto ref = full.activations[layer][static_cast<int>(type)].row(prompt.size() - 1 + s);
        CHECK(max_abs_diff(traj.row(s), ref) <= 1e-4f);
      }
    }
  }
}

TEST_CASE("prefill capture covers the prompt") {
  const Model m = toy_model(16, 1, 2);
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  opts.generate.capture_prefill = true;
  const auto prompt = encode_bytes("abcd");
  const Trace t = run_trace(dec, prompt, 3, opts);
  CHECK(t.store.length() == prompt.size() - 1 + 3);
}

TEST_CASE("capture is transparent and allocates nothing vocabulary-sized") {
  const Model m = toy_model(32, 2, 4, 6);
  const auto prompt = encode_bytes("quiet");
  DenseDecoder dec(m);
  const auto plain = greedy_decode(dec, prompt, 12);

  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  const auto before = audit::snapshot();
  const Trace t = run_trace(dec, prompt, 12, opts);
  const auto after = audit::snapshot();
  CHECK(t.generated == plain.tokens);
  CHECK(after.vocab_buffers == before.vocab_buffers);
  CHECK(after.capture_allocations - before.capture_allocations == 12 * 2 * 3);
  CHECK(after.capture_max_elements < m.config.vocab_size);
}

TEST_CASE("budget zero yields an empty trace") {
  const Model m = toy_model(16, 1, 2);
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = CaptureConfig::all(m.config);
  const Trace t = run_trace(dec, encode_bytes("x"), 0, opts);
  CHECK(t.generated.empty());
  CHECK(t.store.element_count() == 0);
}

TEST_CASE("trace dump round-trips") {
  const Model m = toy_model(16, 2, 2, 2);
  DenseDecoder dec(m);
  TraceOptions opts;
  opts.capture = {{0, 1}, {ActivationType::kAttnOut, ActivationType::kBlockOut}, true};
  const Trace t = run_trace(dec, encode_bytes("dump"), 5, opts);
  TempDir dir("trace");
  save_trace(t, dir.path);
  const Trace back = load_trace(dir.path);
  CHECK(back.prompt == t.prompt);
  CHECK(back.generated == t.generated);
  CHECK(back.store == t.store);

  std::filesystem::resize_file(dir / "trajectories.bin", 12);
  CHECK_THROWS_AS(load_trace(dir.path), Error);
}

}  // TEST_SUITE
