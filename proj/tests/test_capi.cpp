// Exercises the shared library through the C header only.
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "tplens/tplens.h"

namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir = fs::temp_directory_path() /
                 ("tplens_capi_" + std::to_string(std::random_device{}()));
  Scratch() { fs::create_directories(dir); }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string operator/(const char* name) const { return (dir / name).string(); }
};

tpl_model* small_model(uint64_t seed) {
  tpl_model_config c;
  tpl_model_config_default(&c);
  c.d_model = 32;
  c.n_layers = 2;
  tpl_model* m = nullptr;
  REQUIRE(tpl_model_create_random(&c, seed, &m) == TPL_OK);
  return m;
}

std::vector<int32_t> encode(const char* text) {
  size_t n = 0;
  CHECK(tpl_encode(text, nullptr, 0, &n) == TPL_E_BUFFER_TOO_SMALL);
  std::vector<int32_t> ids(n);
  REQUIRE(tpl_encode(text, ids.data(), ids.size(), &n) == TPL_OK);
  return ids;
}

}  // namespace

TEST_SUITE("capi") {

TEST_CASE("status reporting") {
  CHECK(std::string(tpl_status_name(TPL_E_SCHEMA)) == "schema error");
  tpl_model* m = nullptr;
  CHECK(tpl_model_load("/nonexistent/model.bin", &m) == TPL_E_IO);
  CHECK(m == nullptr);
  CHECK(std::strlen(tpl_last_error()) > 0);
  CHECK(tpl_model_create_random(nullptr, 1, &m) == TPL_E_INVALID_ARGUMENT);
  tpl_model_config c;
  tpl_model_config_default(&c);
  c.n_heads = 5;
  CHECK(tpl_model_create_random(&c, 1, &m) == TPL_E_INVALID_ARGUMENT);
  CHECK(std::string(tpl_last_error()).find("divisible") != std::string::npos);
  size_t n = 0;
  CHECK(tpl_encode("ok", nullptr, 0, &n) == TPL_E_BUFFER_TOO_SMALL);
  CHECK(n == 3);
  tpl_model_free(nullptr);
  tpl_report_free(nullptr);
}

TEST_CASE("memory estimate") {
  uint64_t e = 0, b = 0;
  REQUIRE(tpl_memory_estimate(1500, 8192, 80, 1, TPL_BF16, &e, &b) == TPL_OK);
  CHECK(e == 983040000ull);
  CHECK(b == 1966080000ull);
}

TEST_CASE("model save, load and checksum") {
  Scratch s;
  tpl_model* m = small_model(3);
  REQUIRE(tpl_model_save(m, (s / "m.bin").c_str()) == TPL_OK);
  tpl_model* back = nullptr;
  REQUIRE(tpl_model_load((s / "m.bin").c_str(), &back) == TPL_OK);
  uint64_t a = 0, b = 0;
  tpl_model_checksum(m, &a);
  tpl_model_checksum(back, &b);
  CHECK(a == b);
  tpl_model_config c;
  REQUIRE(tpl_model_get_config(back, &c) == TPL_OK);
  CHECK(c.d_model == 32);
  CHECK(c.d_ff == 88);
  tpl_model_free(m);
  tpl_model_free(back);
}

TEST_CASE("trace, report and heatmap") {
  Scratch s;
  tpl_model* m = small_model(5);
  const auto prompt = encode("Hello");
  tpl_trace_options o;
  tpl_trace_options_default(&o);
  tpl_trace* t1 = nullptr;
  tpl_trace* t2 = nullptr;
  REQUIRE(tpl_trace_run(m, prompt.data(), prompt.size(), 6, &o, &t1) == TPL_OK);
  o.tp = 2;
  REQUIRE(tpl_trace_run(m, prompt.data(), prompt.size(), 6, &o, &t2) == TPL_OK);
  std::vector<int32_t> g1(6), g2(6);
  size_t n = 0;
  REQUIRE(tpl_trace_generated(t1, g1.data(), g1.size(), &n) == TPL_OK);
  REQUIRE(tpl_trace_generated(t2, g2.data(), g2.size(), &n) == TPL_OK);
  CHECK(g1 == g2);
  size_t steps = 0;
  tpl_trace_steps(t1, &steps);
  CHECK(steps == 6);
  std::vector<float> traj(6 * 32);
  REQUIRE(tpl_trace_trajectory(t1, 1, TPL_BLOCK_OUT, traj.data(), traj.size(), &n) == TPL_OK);
  CHECK(n == 6 * 32);

  REQUIRE(tpl_trace_save(t1, (s / "trace").c_str()) == TPL_OK);
  tpl_trace* loaded = nullptr;
  REQUIRE(tpl_trace_load((s / "trace").c_str(), &loaded) == TPL_OK);

  tpl_report* r = nullptr;
  REQUIRE(tpl_report_build(loaded, m, 3, 1, &r) == TPL_OK);
  size_t records = 0;
  tpl_report_records(r, &records);
  CHECK(records == 2 * 3 * 6);
  for (uint32_t t = 0; t < 6; ++t) {
    int32_t id = -1;
    float p = 0;
    REQUIRE(tpl_report_top1(r, 1, TPL_BLOCK_OUT, t, &id, &p) == TPL_OK);
    CHECK(id == g1[t]);
    CHECK(p > 0.0f);
  }
  REQUIRE(tpl_report_save(r, (s / "r.json").c_str()) == TPL_OK);
  tpl_report* back = nullptr;
  REQUIRE(tpl_report_load((s / "r.json").c_str(), &back) == TPL_OK);
  REQUIRE(tpl_report_svg(back, "block", 0, 1, (s / "h.svg").c_str()) == TPL_OK);
  CHECK(fs::file_size(s / "h.svg") > 100);

  tpl_report* bad = nullptr;
  CHECK(tpl_report_parse("{\"schema_version\": 1}", &bad) == TPL_E_SCHEMA);
  CHECK(std::string(tpl_last_error()).find("schema error at /") == 0);
  CHECK(tpl_report_parse("{not json", &bad) == TPL_E_SCHEMA);
  CHECK(bad == nullptr);

  tpl_report_free(r);
  tpl_report_free(back);
  tpl_trace_free(t1);
  tpl_trace_free(t2);
  tpl_trace_free(loaded);
  tpl_model_free(m);
}

TEST_CASE("steering vectors and sweep") {
  Scratch s;
  tpl_model* m = small_model(9);
  const char* base[] = {"Q: pick (A) or (B). Answer: B"};
  const char* target[] = {"Q: pick (A) or (B). Answer: A"};
  tpl_vector* v = nullptr;
  REQUIRE(tpl_vector_build(m, base, 1, target, 1, 1, TPL_ATTN_OUT, &v) == TPL_OK);
  CHECK(tpl_vector_build(m, base, 1, base, 1, 1, TPL_ATTN_OUT, &v) == TPL_E_DEGENERATE);
  REQUIRE(tpl_vector_save(v, (s / "v.bin").c_str()) == TPL_OK);
  tpl_vector_free(v);
  tpl_vector* u = nullptr;
  REQUIRE(tpl_vector_unembedding(m, 'A', 1, &u) == TPL_OK);

  const char* prompts[] = {"Q1: (A) or (B)? Answer: ", "Q2: (A) or (B)? Answer: ",
                           "Q3: (A) or (B)? Answer: "};
  tpl_sweep_options o;
  tpl_sweep_options_default(&o);
  tpl_sweep_summary sum{};
  REQUIRE(tpl_steer_sweep(m, u, prompts, 3, 'A', &o, (s / "sw.json").c_str(),
                          (s / "sw.csv").c_str(), &sum) == TPL_OK);
  CHECK(sum.n_prompts == 3);
  CHECK(sum.mean_slope > 0.0);
  CHECK(sum.control_p_value == doctest::Approx(1.0));
  CHECK(fs::exists(s / "sw.csv"));
  o.alphas = "0:1:2";
  CHECK(tpl_steer_sweep(m, u, prompts, 3, 'A', &o, nullptr, nullptr, &sum) ==
        TPL_E_INVALID_ARGUMENT);
  tpl_vector_free(u);
  tpl_model_free(m);
}

TEST_CASE("bench through the C API") {
  Scratch s;
  tpl_model* m = small_model(2);
  const auto prompt = encode("b");
  const uint32_t budgets[] = {2, 3};
  tpl_bench_options o;
  tpl_bench_options_default(&o);
  o.budgets = budgets;
  o.n_budgets = 2;
  double speedups[2] = {0, 0};
  REQUIRE(tpl_bench(m, prompt.data(), prompt.size(), &o, (s / "b.json").c_str(), nullptr,
                    speedups) == TPL_OK);
  CHECK(speedups[0] > 0.0);
  CHECK(speedups[1] > 0.0);
  tpl_model_free(m);
}

}  // TEST_SUITE
