// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Dense row-major tensors and the handful of kernels a small decoder-only
// transformer needs. Every reduction runs in a fixed order (ascending index),
// so identical inputs give bit-identical outputs, independent of how many
// rows are processed together.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "icarus/errors.hpp"

namespace icarus {

using Shape = std::vector<size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<>());
}

template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;
  static constexpr int kPrecisionBits = static_cast<int>(sizeof(T) * 8);

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_numel(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const size_t r = rows.size();
    const size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t numel() const { return data_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  // 2-D view: the last dimension is the row length, everything before it is
  // flattened into rows.
  size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }
  T& operator()(size_t r, size_t c) { return data_[r * cols() + c]; }
  const T& operator()(size_t r, size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  BasicTensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(s));
    }
    return BasicTensor(std::move(s), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  // Exact equality of shape and of every bit in the buffer.
  bool bit_identical(const BasicTensor& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace detail

// c[m,n] = a[m,k] * b[k,n]. Each output element accumulates over k in
// ascending order; rows are independent, so a row's result does not depend
// on which other rows share the call.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = c.data().data();
  for (size_t i = 0; i < m; ++i) {
    T* crow = cp + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T av = ap[i * k + p];
      const T* brow = bp + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// a[m,k] * b[n,k]^T -> [m,n]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt inner dimensions differ: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  BasicTensor<T> c({m, n});
  for (size_t i = 0; i < m; ++i) {
    const T* arow = a.data().data() + i * k;
    for (size_t j = 0; j < n; ++j) {
      const T* brow = b.data().data() + j * k;
      T acc = 0;
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

// a[k,m]^T * b[k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn inner dimensions differ: " +
                         shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  BasicTensor<T> c({m, n});
  T* cp = c.data().data();
  for (size_t p = 0; p < k; ++p) {
    const T* arow = a.data().data() + p * m;
    const T* brow = b.data().data() + p * n;
    for (size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = cp + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  const T mx = *std::max_element(row.begin(), row.end());
  T sum = 0;
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : row) v /= sum;
}

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x) {
  if (x.rank() == 0 || x.cols() == 0) {
    throw DimensionError("softmax over empty last dimension, shape " +
                         shape_str(x.shape()));
  }
  BasicTensor<T> y = x;
  for (size_t r = 0; r < y.rows(); ++r) softmax_inplace(y.row(r));
  return y;
}

template <typename T>
void rms_norm_row(std::span<const T> x, std::span<const T> gain, T eps,
                  std::span<T> out) {
  T ss = 0;
  for (T v : x) ss += v * v;
  const T inv = T(1) / std::sqrt(ss / static_cast<T>(x.size()) + eps);
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps) {
  if (gain.numel() != x.cols()) {
    throw DimensionError("rms_norm gain " + shape_str(gain.shape()) +
                         " does not match hidden size of " + shape_str(x.shape()));
  }
  BasicTensor<T> y(x.shape());
  for (size_t r = 0; r < x.rows(); ++r) rms_norm_row(x.row(r), gain.data(), eps, y.row(r));
  return y;
}

// Angle of rotary pair `pair` (0-based) at `position` for a head of
// `head_dim` values: position * theta^(-2*pair/head_dim).
inline double rope_angle(size_t position, size_t pair, size_t head_dim,
                         double theta_base) {
  const double inv_freq =
      std::pow(theta_base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
  return static_cast<double>(position) * inv_freq;
}

// Rotates consecutive (even, odd) pairs of every head_dim-sized chunk of v.
template <typename T>
void rope_inplace(std::span<T> v, size_t head_dim, size_t position, double theta_base,
                  bool inverse = false) {
  if (head_dim % 2 != 0) {
    throw ConfigError("rotary embedding needs an even head dimension, got " +
                      std::to_string(head_dim));
  }
  for (size_t p = 0; p < head_dim / 2; ++p) {
    const double ang = rope_angle(position, p, head_dim, theta_base);
    const T c = static_cast<T>(std::cos(ang));
    const T s = static_cast<T>(inverse ? -std::sin(ang) : std::sin(ang));
    for (size_t base = 0; base < v.size(); base += head_dim) {
      T& x0 = v[base + 2 * p];
      T& x1 = v[base + 2 * p + 1];
      const T a = x0, b = x1;
      x0 = a * c - b * s;
      x1 = a * s + b * c;
    }
  }
}

// Each row of q_or_k is one head vector (last dim = head_dim), all at the
// same absolute position.
template <typename T>
BasicTensor<T> rope_apply(const BasicTensor<T>& q_or_k, size_t position, double theta_base) {
  BasicTensor<T> y = q_or_k;
  rope_inplace<T>(y.data(), y.cols(), position, theta_base);
  return y;
}

template <typename T>
T silu_scalar(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.data()) v = silu_scalar(v);
  return y;
}

// -log softmax(logits)[target], computed through the log-sum-exp.
template <typename T>
T cross_entropy(std::span<const T> logits, size_t target) {
  if (target >= logits.size()) {
    throw IndexError("target " + std::to_string(target) + " outside vocabulary of " +
                     std::to_string(logits.size()));
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[target];
}

template <typename T>
T cross_entropy(const BasicTensor<T>& logits, size_t target) {
  return cross_entropy<T>(logits.data(), target);
}

// Greedy pick; ties go to the lowest index.
template <typename T>
size_t argmax(std::span<const T> v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Central differences at 64-bit: (f(p+h) - f(p-h)) / 2h per coordinate.
inline Tensor64 finite_difference_grad(const std::function<double(const Tensor64&)>& f,
                                       const Tensor64& params, double h) {
  if (!(h > 0)) throw ConfigError("finite difference step must be positive");
  Tensor64 grad(params.shape());
  Tensor64 probe = params;
  for (size_t i = 0; i < params.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("objective is not finite at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2 * h);
  }
  return grad;
}

// Tensor helpers used across modules.

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  for (size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.numel() != b.numel()) return INFINITY;
  double m = 0;
  for (size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
double l2_norm(const BasicTensor<T>& a) {
  double s = 0;
  for (T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// ||a - b|| / max(||b||, floor)
template <typename T>
double relative_error(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      double floor = 1e-12) {
  if (a.numel() != b.numel()) return INFINITY;
  double d = 0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double e = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d += e * e;
  }
  return std::sqrt(d) / std::max(l2_norm(b), floor);
}

}  // namespace icarus
