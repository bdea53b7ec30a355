#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kanet/error.hpp"

namespace kanet {

using Shape = std::vector<std::size_t>;
using ClassId = int;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Value type: copies are deep.
///
/// Invariant: shape_size(shape()) == size(). Most operations treat a tensor as a
/// matrix; a 1-D tensor of length n is viewed as a 1 x n row.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return Tensor({rows, cols}, std::vector<T>(values));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T{1}) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Leading extent for a matrix view (1 for a 1-D tensor).
  std::size_t rows() const noexcept {
    if (shape_.size() <= 1) return 1;
    return shape_size(Shape(shape_.begin(), shape_.end() - 1));
  }
  /// Last extent.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }

  /// Copy of row r as a 1 x cols tensor.
  Tensor row_tensor(std::size_t r) const {
    auto src = row(r);
    return Tensor({1, cols()}, std::vector<T>(src.begin(), src.end()));
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// True when shapes match and every element has the identical bit pattern.
template <std::floating_point T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

/// Stack equal-length rows into an n x D matrix.
template <std::floating_point T>
Tensor<T> stack_rows(std::span<const Tensor<T>> rows) {
  if (rows.empty()) return Tensor<T>({0, 0});
  const std::size_t d = rows.front().size();
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw DimensionError("stack_rows: ragged rows");
    std::copy(rows[i].data().begin(), rows[i].data().end(), out.row(i).begin());
  }
  return out;
}

template <std::floating_point T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  return stack_rows(std::span<const Tensor<T>>(rows));
}

/// Rows of `src` at `indices`, in that order.
template <std::floating_point T>
Tensor<T> select_rows(const Tensor<T>& src, std::span<const std::size_t> indices) {
  Tensor<T> out({indices.size(), src.cols()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= src.rows()) throw DimensionError("select_rows: index out of range");
    auto r = src.row(indices[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

/// Append the rows of `bottom` under `top`.
template <std::floating_point T>
Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom) {
  if (top.size() == 0) return bottom.reshaped({bottom.size() == 0 ? 0 : bottom.rows(), bottom.cols()});
  if (bottom.size() == 0) return top.reshaped({top.rows(), top.cols()});
  if (top.cols() != bottom.cols()) throw DimensionError("concat_rows: column mismatch");
  std::vector<T> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor<T>({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

}  // namespace kanet
