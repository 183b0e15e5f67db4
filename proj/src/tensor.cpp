#include "tplens/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tplens/error.hpp"

namespace tplens {

std::size_t bytes_per_element(Precision p) {
  switch (p) {
    case Precision::kF32:
      return 4;
    case Precision::kBF16:
      return 2;
  }
  return 0;
}

std::string_view precision_name(Precision p) {
  return p == Precision::kF32 ? "f32" : "bf16";
}

Precision parse_precision(std::string_view name) {
  if (name == "f32") return Precision::kF32;
  if (name == "bf16") return Precision::kBF16;
  fail(ErrorKind::kInvalidArgument,
       "unknown precision '" + std::string(name) + "'");
}

std::size_t shape_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(shape_elements(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_elements(shape_) == data_.size(), ErrorKind::kShapeMismatch,
          "tensor shape " + shape_string(shape_) + " does not hold " +
              std::to_string(data_.size()) + " elements");
}

Tensor Tensor::from_vector(std::vector<float> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::from_rows(const std::vector<std::vector<float>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    require(r.size() == cols, ErrorKind::kShapeMismatch, "ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), cols}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < shape_.size(), ErrorKind::kShapeMismatch,
          "axis out of range for tensor " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const { return shape_.empty() ? 1 : shape_[0]; }

std::size_t Tensor::row_size() const {
  if (shape_.empty()) return 1;
  return shape_[0] == 0 ? shape_elements(Shape(shape_.begin() + 1, shape_.end()))
                        : data_.size() / shape_[0];
}

std::span<float> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<float>(data_).subspan(i * n, n);
}

std::span<const float> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const float>(data_).subspan(i * n, n);
}

float& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * shape_[1] + j];
}

float Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  // memcmp-style comparison: -0.0 and 0.0 differ, NaN payloads compare equal.
  return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(),
                    [](float x, float y) {
                      return std::bit_cast<std::uint32_t>(x) ==
                             std::bit_cast<std::uint32_t>(y);
                    });
}

void check_finite(std::span<const float> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(ErrorKind::kNumeric, "non-finite value in " + std::string(what) +
                                    " at element " + std::to_string(i));
    }
  }
}

float dot(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

float l2_norm(std::span<const float> x) {
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(acc));
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorKind::kShapeMismatch,
          "max_abs_diff: length mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::kShapeMismatch,
          "matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::kShapeMismatch,
          "matmul inner dimensions disagree: " + shape_string(a.shape()) +
              " x " + shape_string(b.shape()));
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  }
  check_finite(out.data(), "matmul");
  return out;
}

void linear_into(std::span<const float> x, const Tensor& w,
                 std::span<float> y) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  require(x.size() == in && y.size() == out, ErrorKind::kShapeMismatch,
          "linear: input " + std::to_string(x.size()) + " / output " +
              std::to_string(y.size()) + " vs weight " +
              shape_string(w.shape()));
  const float* wp = w.data().data();
  for (std::size_t o = 0; o < out; ++o) {
    y[o] = dot(x, std::span<const float>(wp + o * in, in));
  }
}

double dot_wide(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

void linear_wide_into(std::span<const float> x, const Tensor& w,
                      std::span<double> y) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  require(x.size() == in && y.size() == out, ErrorKind::kShapeMismatch,
          "linear: input " + std::to_string(x.size()) + " / output " +
              std::to_string(y.size()) + " vs weight " +
              shape_string(w.shape()));
  const float* wp = w.data().data();
  for (std::size_t o = 0; o < out; ++o) {
    y[o] = dot_wide(x, std::span<const float>(wp + o * in, in));
  }
}

void linear_wide_into(std::span<const float> x, const Tensor& w,
                      std::span<float> y) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  require(x.size() == in && y.size() == out, ErrorKind::kShapeMismatch,
          "linear: input " + std::to_string(x.size()) + " / output " +
              std::to_string(y.size()) + " vs weight " +
              shape_string(w.shape()));
  const float* wp = w.data().data();
  for (std::size_t o = 0; o < out; ++o) {
    y[o] = static_cast<float>(dot_wide(x, std::span<const float>(wp + o * in, in)));
  }
}

Tensor linear_wide(const Tensor& x, const Tensor& w) {
  require(w.rank() == 2, ErrorKind::kShapeMismatch, "linear weight rank");
  const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
  Tensor y(Shape{rows, w.dim(0)});
  for (std::size_t i = 0; i < rows; ++i) {
    auto xr = x.rank() == 1 ? x.data() : x.row(i);
    linear_wide_into(xr, w, y.row(i));
  }
  check_finite(y.data(), "linear");
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require(w.rank() == 2, ErrorKind::kShapeMismatch, "linear weight rank");
  const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
  Tensor y(Shape{rows, w.dim(0)});
  for (std::size_t i = 0; i < rows; ++i) {
    auto xr = x.rank() == 1 ? x.data() : x.row(i);
    linear_into(xr, w, y.row(i));
  }
  check_finite(y.data(), "linear");
  return y;
}

void rms_norm_into(std::span<const float> x, std::span<const float> gain,
                   float eps, std::span<float> out) {
  require(x.size() == gain.size() && out.size() == x.size(),
          ErrorKind::kShapeMismatch, "rms_norm: gain length mismatch");
  require(eps >= 0.0f, ErrorKind::kInvalidArgument, "rms_norm: eps < 0");
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float ms = ss / static_cast<float>(x.size()) + eps;
  // A zero row with eps == 0 normalizes to zero rather than 0/0.
  const float scale = ms > 0.0f ? 1.0f / std::sqrt(ms) : 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gain[i];
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  require(!x.shape().empty() && x.shape().back() == gain.size(),
          ErrorKind::kShapeMismatch,
          "rms_norm: last dimension of " + shape_string(x.shape()) +
              " != gain length " + std::to_string(gain.size()));
  Tensor out(x.shape());
  const std::size_t d = gain.size();
  for (std::size_t r = 0; d && r < x.size() / d; ++r) {
    rms_norm_into(x.data().subspan(r * d, d), gain.data(), eps,
                  out.data().subspan(r * d, d));
  }
  check_finite(out.data(), "rms_norm");
  return out;
}

std::vector<float> softmax(std::span<const float> x) {
  require(!x.empty(), ErrorKind::kInvalidArgument, "softmax of empty input");
  check_finite(x, "softmax input");
  const float mx = *std::max_element(x.begin(), x.end());
  std::vector<float> out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (float& v : out) v *= inv;
  return out;
}

Tensor softmax(const Tensor& x) {
  return Tensor(x.shape(), softmax(x.data()));
}

std::vector<IndexedValue> top_k_select(std::span<const float> x,
                                       std::size_t k) {
  require(k >= 1, ErrorKind::kInvalidArgument, "top_k_select: k must be >= 1");
  const std::size_t take = std::min(k, x.size());
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + take, idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (x[a] != x[b]) return x[a] > x[b];
                      return a < b;
                    });
  std::vector<IndexedValue> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({idx[i], x[idx[i]]});
  return out;
}

std::size_t argmax(std::span<const float> x) {
  require(!x.empty(), ErrorKind::kInvalidArgument, "argmax of empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

void add_into(std::span<float> acc, std::span<const float> x) {
  require(acc.size() == x.size(), ErrorKind::kShapeMismatch,
          "add: length mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace tplens
