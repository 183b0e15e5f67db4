#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tplens/error.hpp"
#include "tplens/tensor.hpp"

using namespace tplens;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(r * c);
  for (auto& x : v) x = n(rng);
  return Tensor({r, c}, v);
}

// Plain triple loop, accumulating left to right like the kernel contract.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float s = 0.0f;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.at(i, j) = s;
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor shape must match data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), Error);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.row_size() == 3);
  CHECK(t.at(1, 2) == 6.0f);
  CHECK(shape_string(t.shape()) == "[2x3]");
}

TEST_CASE("matmul small cases") {
  Tensor id({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  CHECK(matmul(id, b) == b);
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})) ==
        Tensor({1, 1}, {11}));
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), Error);
}

TEST_CASE("matmul equals the triple loop exactly") {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor(rng, 7, 5), b = random_tensor(rng, 5, 3);
  CHECK(matmul(a, b) == naive_matmul(a, b));
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    const Tensor x = random_tensor(rng, m, k), y = random_tensor(rng, k, n);
    CHECK(matmul(x, y) == naive_matmul(x, y));
    Tensor eye({k, k});
    for (std::size_t i = 0; i < k; ++i) eye.at(i, i) = 1.0f;
    CHECK(matmul(matmul(x, eye), y) == matmul(x, matmul(eye, y)));
  }
}

TEST_CASE("linear is x W^T with bitwise-identical rows") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(rng, 4, 6), w = random_tensor(rng, 5, 6);
  const Tensor y = linear(x, w);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<float> row(5);
    linear_into(x.row(i), w, row);
    CHECK(std::equal(row.begin(), row.end(), y.row(i).begin()));
    for (std::size_t o = 0; o < 5; ++o) CHECK(row[o] == dot(x.row(i), w.row(o)));
  }
}

TEST_CASE("rms_norm examples") {
  CHECK(rms_norm(Tensor({1, 3}, {0, 0, 0}), Tensor({3}, {2, 3, 4}), 1e-5f) ==
        Tensor({1, 3}, {0, 0, 0}));
  const Tensor y = rms_norm(Tensor({1, 2}, {3, 4}), Tensor({2}, {1, 1}), 0.0f);
  CHECK(y.at(0, 0) == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-6));
  CHECK(y.at(0, 1) == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-6));
  CHECK(y.at(0, 0) == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(y.at(0, 1) == doctest::Approx(1.1314).epsilon(1e-4));
  CHECK(rms_norm(Tensor({1, 2}, {3, 4}), Tensor({2}, {0, 0}), 1e-5f) ==
        Tensor({1, 2}, {0, 0}));
  CHECK_THROWS_AS(rms_norm(Tensor({1, 2}, {3, 4}), Tensor({3}), 1e-5f), Error);
}

TEST_CASE("rms_norm output has unit RMS") {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor(rng, 16, 24);
  const Tensor y = rms_norm(x, Tensor({24}, std::vector<float>(24, 1.0f)), 0.0f);
  for (std::size_t i = 0; i < 16; ++i) {
    double ss = 0.0;
    for (float v : y.row(i)) ss += double(v) * v;
    CHECK(std::sqrt(ss / 24.0) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("softmax examples") {
  for (float c : {-7.0f, 0.0f, 3.5f}) {
    for (float p : softmax(std::vector<float>{c, c, c})) {
      CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    }
  }
  const auto s = softmax(std::vector<float>{3, 2});
  CHECK(s[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.2689).epsilon(1e-3));
  CHECK(s[0] == doctest::Approx(std::exp(3.0) / (std::exp(3.0) + std::exp(2.0))));
  const auto big = softmax(std::vector<float>{1000, 0});
  CHECK(big[0] == 1.0f);
  CHECK(big[1] >= 0.0f);
  CHECK(big[1] < 1e-30f);
  CHECK_THROWS_AS(softmax(std::vector<float>{}), Error);
}

TEST_CASE("softmax is a probability vector") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-50.0f, 50.0f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> x(1 + trial);
    for (auto& v : x) v = u(rng);
    const auto p = softmax(x);
    double total = 0.0;
    for (float v : p) {
      CHECK(v >= 0.0f);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("top_k_select examples") {
  const auto a = top_k_select(std::vector<float>{0.1f, 0.9f, 0.5f}, 2);
  REQUIRE(a.size() == 2);
  CHECK(a[0] == IndexedValue{1, 0.9f});
  CHECK(a[1] == IndexedValue{2, 0.5f});
  const auto ties = top_k_select(std::vector<float>{5, 5, 1}, 2);
  CHECK(ties == std::vector<IndexedValue>{{0, 5}, {1, 5}});
  CHECK(top_k_select(std::vector<float>{1, 2, 3}, 10).size() == 3);
}

TEST_CASE("top_k_select with k = n is the full argsort") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> small(0, 5);  // many ties
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<float> x(12);
    for (auto& v : x) v = static_cast<float>(small(rng));
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return x[i] > x[j]; });
    const auto top = top_k_select(x, x.size());
    REQUIRE(top.size() == x.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(top[i].index == order[i]);
  }
}

TEST_CASE("non-finite values are rejected") {
  std::vector<float> bad{1.0f, std::nanf("")};
  CHECK_THROWS_AS(check_finite(bad, "x"), Error);
  bad[1] = INFINITY;
  CHECK_THROWS_AS(check_finite(bad, "x"), Error);
}

TEST_CASE("precision accounting") {
  CHECK(bytes_per_element(Precision::kF32) == 4);
  CHECK(bytes_per_element(Precision::kBF16) == 2);
  CHECK(parse_precision("bf16") == Precision::kBF16);
  CHECK_THROWS_AS(parse_precision("fp8"), Error);
}

}  // TEST_SUITE
