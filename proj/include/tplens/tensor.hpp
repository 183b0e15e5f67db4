#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tplens {

// Storage label for memory accounting. All arithmetic runs in f32.
enum class Precision { kF32, kBF16 };

std::size_t bytes_per_element(Precision p);
std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);

using Shape = std::vector<std::size_t>;

std::size_t shape_elements(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major f32 array with an explicit shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);
  Tensor(std::initializer_list<std::size_t> shape, std::vector<float> data)
      : Tensor(Shape(shape), std::move(data)) {}

  static Tensor from_vector(std::vector<float> values);
  static Tensor from_rows(const std::vector<std::vector<float>>& rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  // Row views over the leading axis; the row length is the product of the
  // remaining dimensions.
  std::size_t rows() const;
  std::size_t row_size() const;
  std::span<float> row(std::size_t i);
  std::span<const float> row(std::size_t i) const;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t i, std::size_t j);
  float at(std::size_t i, std::size_t j) const;

  // Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Throws ErrorKind::kNumeric naming `what` if any entry is NaN or Inf.
void check_finite(std::span<const float> values, std::string_view what);

float dot(std::span<const float> a, std::span<const float> b);
float l2_norm(std::span<const float> x);
float max_abs_diff(std::span<const float> a, std::span<const float> b);

// Standard product with a fixed left-to-right reduction over k.
Tensor matmul(const Tensor& a, const Tensor& b);

// y[i, o] = sum_j x[i, j] * w[o, j]; weights stored [out x in].
Tensor linear(const Tensor& x, const Tensor& w);
// Single-row form writing into caller storage. Every output element is a
// `dot` over the full input row, so batched and per-row calls agree bitwise.
void linear_into(std::span<const float> x, const Tensor& w,
                 std::span<float> y);

// Output projections whose input is split across shards (wo, w_down). The
// sum runs in double and is rounded once, so a shard-split sum reduced in
// double lands on the same float as the unsplit one.
double dot_wide(std::span<const float> a, std::span<const float> b);
void linear_wide_into(std::span<const float> x, const Tensor& w,
                      std::span<double> y);
void linear_wide_into(std::span<const float> x, const Tensor& w,
                      std::span<float> y);
Tensor linear_wide(const Tensor& x, const Tensor& w);

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);
void rms_norm_into(std::span<const float> x, std::span<const float> gain,
                   float eps, std::span<float> out);

Tensor softmax(const Tensor& x);
std::vector<float> softmax(std::span<const float> x);

struct IndexedValue {
  std::size_t index;
  float value;
  friend bool operator==(const IndexedValue&, const IndexedValue&) = default;
};

/// Largest `min(k, n)` entries in descending order; equal values keep the
/// lower index first.
std::vector<IndexedValue> top_k_select(std::span<const float> x,
                                       std::size_t k);

std::size_t argmax(std::span<const float> x);

float silu(float x);

void add_into(std::span<float> acc, std::span<const float> x);

}  // namespace tplens
