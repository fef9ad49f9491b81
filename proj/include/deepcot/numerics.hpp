#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepcot/error.hpp"

namespace deepcot {

// Dense row-major matrix. Used for activations, key/value blocks and weights alike.
template <std::floating_point T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<T>> rows) : rows_(rows.size()) {
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged initializer for Matrix");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  void set_row(std::size_t r, std::span<const T> values) {
    if (values.size() != cols_) throw ShapeError("set_row: width mismatch");
    std::copy(values.begin(), values.end(), row(r).begin());
  }

  template <std::floating_point U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

enum class ActivationKind { Softmax, Soft };

inline std::string_view to_string(ActivationKind kind) {
  return kind == ActivationKind::Softmax ? "softmax" : "soft";
}

inline ActivationKind parse_activation(std::string_view s) {
  if (s == "softmax") return ActivationKind::Softmax;
  if (s == "soft") return ActivationKind::Soft;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected softmax|soft)");
}

template <std::floating_point T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T x) { return std::isfinite(x); });
}

namespace detail {

template <std::floating_point T>
void require_finite(std::span<const T> xs, const char* what) {
  if (!all_finite(xs)) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace detail

template <std::floating_point T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <std::floating_point T>
T squared_distance(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  detail::require_finite<T>(c.data(), "matmul");
  return c;
}

// Row vector times matrix, plus an optional bias (empty span = no bias).
// Same accumulation order as matmul, so a row of matmul(X, W) equals vec_mat(X.row(i), W).
template <std::floating_point T>
std::vector<T> vec_mat(std::span<const T> x, const Matrix<T>& w, std::span<const T> bias = {}) {
  if (x.size() != w.rows()) throw ShapeError("vec_mat: vector length != matrix rows");
  if (!bias.empty() && bias.size() != w.cols()) throw ShapeError("vec_mat: bias length");
  std::vector<T> y(w.cols(), T{0});
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T xk = x[k];
    const auto wrow = w.row(k);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += xk * wrow[j];
  }
  if (!bias.empty()) {
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += bias[j];
  }
  return y;
}

// In-place softmax of one row with max subtraction.
template <std::floating_point T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  detail::require_finite<T>(row, "softmax");
  const T mx = *std::max_element(row.begin(), row.end());
  T sum{0};
  for (auto& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : row) x /= sum;
}

template <std::floating_point T>
Matrix<T> row_softmax(const Matrix<T>& scores) {
  Matrix<T> out = scores;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

template <std::floating_point T>
Matrix<T> pairwise_sq_euclid(const Matrix<T>& q, const Matrix<T>& k) {
  if (q.cols() != k.cols()) throw ShapeError("pairwise_sq_euclid: feature width mismatch");
  Matrix<T> out(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < k.rows(); ++j) out(i, j) = squared_distance(q.row(i), k.row(j));
  }
  detail::require_finite<T>(out.data(), "pairwise_sq_euclid");
  return out;
}

// SOFT weight for one (query, key) pair: exp(-|q-k|^2 / (2 sqrt(head_dim))).
template <std::floating_point T>
T soft_weight(std::span<const T> q, std::span<const T> k, std::size_t head_dim) {
  return std::exp(-squared_distance(q, k) / (T{2} * std::sqrt(static_cast<T>(head_dim))));
}

// Unnormalized SOFT attention matrix. Rows are deliberately not normalized.
template <std::floating_point T>
Matrix<T> soft_activation(const Matrix<T>& q, const Matrix<T>& k, std::size_t head_dim) {
  if (head_dim == 0) throw ShapeError("soft_activation: head_dim must be positive");
  if (q.cols() != head_dim || k.cols() != head_dim) {
    throw ShapeError("soft_activation: q/k width must equal head_dim");
  }
  Matrix<T> out(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < k.rows(); ++j) out(i, j) = soft_weight(q.row(i), k.row(j), head_dim);
  }
  detail::require_finite<T>(out.data(), "soft_activation");
  return out;
}

template <std::floating_point T>
T max_abs(std::span<const T> xs) {
  T m{0};
  for (T x : xs) m = std::max(m, std::abs(x));
  return m;
}

template <std::floating_point T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <std::floating_point T>
T l2_norm(std::span<const T> xs) {
  return std::sqrt(dot(xs, xs));
}

}  // namespace deepcot
