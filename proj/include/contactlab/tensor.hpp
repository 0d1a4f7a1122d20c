#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/errors.hpp"

namespace contactlab::hierarchy {

/// Dense order-n array over a space of `extent` points, stored row-major
/// (first index most significant). Order 0 holds a single scalar.
class CorrelationTensor {
 public:
  CorrelationTensor() : values_(1, 1.0) {}

  CorrelationTensor(int order, std::size_t extent, double fill = 0.0) : order_(order), extent_(extent) {
    if (order < 0) throw ModelError("tensor order must be non-negative");
    double count = std::pow(static_cast<double>(extent), order);
    if (count > 5e7) throw ModelError("tensor too large for dense storage");
    values_.assign(checked_size(order, extent), fill);
  }

  static CorrelationTensor constant(int order, std::size_t extent, double c) { return {order, extent, c}; }

  int order() const noexcept { return order_; }
  std::size_t extent() const noexcept { return extent_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& operator[](std::size_t flat) { return values_[flat]; }
  double operator[](std::size_t flat) const { return values_[flat]; }

  double& at(std::span<const std::size_t> idx) { return values_[flat_index(idx)]; }
  double at(std::span<const std::size_t> idx) const { return values_[flat_index(idx)]; }

  std::size_t flat_index(std::span<const std::size_t> idx) const {
    if (idx.size() != static_cast<std::size_t>(order_)) throw ModelError("tensor index has wrong order");
    std::size_t f = 0;
    for (auto i : idx) {
      if (i >= extent_) throw ModelError("tensor index out of range");
      f = f * extent_ + i;
    }
    return f;
  }

  /// Multi-index of a flat position.
  std::vector<std::size_t> unflatten(std::size_t flat) const {
    std::vector<std::size_t> idx(static_cast<std::size_t>(order_));
    for (int k = order_ - 1; k >= 0; --k) {
      idx[static_cast<std::size_t>(k)] = flat % extent_;
      flat /= extent_;
    }
    return idx;
  }

  std::span<double> data() noexcept { return values_; }
  std::span<const double> data() const noexcept { return values_; }

  double sup_norm() const {
    double m = 0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }

  double min() const { return *std::min_element(values_.begin(), values_.end()); }
  double max() const { return *std::max_element(values_.begin(), values_.end()); }

  CorrelationTensor& operator+=(const CorrelationTensor& o) {
    check_shape(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }

  CorrelationTensor& operator-=(const CorrelationTensor& o) {
    check_shape(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }

  CorrelationTensor& operator*=(double c) {
    for (double& v : values_) v *= c;
    return *this;
  }

  CorrelationTensor& add_scalar(double c) {
    for (double& v : values_) v += c;
    return *this;
  }

  friend CorrelationTensor operator+(CorrelationTensor a, const CorrelationTensor& b) { return a += b; }
  friend CorrelationTensor operator-(CorrelationTensor a, const CorrelationTensor& b) { return a -= b; }
  friend CorrelationTensor operator*(double c, CorrelationTensor a) { return a *= c; }

  /// a += c * b
  void axpy(double c, const CorrelationTensor& b) {
    check_shape(b);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += c * b.values_[i];
  }

  /// Copy with coordinates permuted: out(x_{perm[0]}, ...) = this(x_0, ...).
  CorrelationTensor permuted(std::span<const std::size_t> perm) const {
    if (perm.size() != static_cast<std::size_t>(order_)) throw ModelError("permutation has wrong length");
    CorrelationTensor out(order_, extent_);
    std::vector<std::size_t> dst(perm.size());
    for (std::size_t f = 0; f < values_.size(); ++f) {
      auto src = unflatten(f);
      for (std::size_t k = 0; k < perm.size(); ++k) dst[perm[k]] = src[k];
      out.at(dst) = values_[f];
    }
    return out;
  }

  /// Largest |k(x) - k(x with two coordinates swapped)| over all transpositions.
  double asymmetry() const {
    double worst = 0;
    std::vector<std::size_t> perm(static_cast<std::size_t>(order_));
    for (int i = 0; i < order_; ++i) {
      for (int j = i + 1; j < order_; ++j) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
        auto p = permuted(perm);
        for (std::size_t f = 0; f < values_.size(); ++f) worst = std::max(worst, std::abs(p.values_[f] - values_[f]));
      }
    }
    return worst;
  }

  bool same_shape(const CorrelationTensor& o) const noexcept {
    return order_ == o.order_ && extent_ == o.extent_;
  }

 private:
  static std::size_t checked_size(int order, std::size_t extent) {
    std::size_t n = 1;
    for (int k = 0; k < order; ++k) n *= extent;
    return n;
  }

  void check_shape(const CorrelationTensor& o) const {
    if (!same_shape(o)) throw ModelError("tensor shape mismatch");
  }

  int order_ = 0;
  std::size_t extent_ = 0;
  std::vector<double> values_;
};

/// out = M applied along `axis`: out(.., x_axis, ..) = sum_y M(x_axis, y) k(.., y, ..).
inline CorrelationTensor apply_along_axis(const Eigen::MatrixXd& M, const CorrelationTensor& k, int axis) {
  const std::size_t N = k.extent();
  if (M.rows() != static_cast<Eigen::Index>(N) || M.cols() != static_cast<Eigen::Index>(N)) {
    throw ModelError("operator does not match tensor extent");
  }
  if (axis < 0 || axis >= k.order()) throw ModelError("axis out of range");
  std::size_t inner = 1;
  for (int a = axis + 1; a < k.order(); ++a) inner *= N;
  const std::size_t outer = k.size() / (N * inner);
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  CorrelationTensor out(k.order(), N);
  const auto rows = static_cast<Eigen::Index>(N);
  const auto cols = static_cast<Eigen::Index>(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    Eigen::Map<const RowMajor> src(k.data().data() + o * N * inner, rows, cols);
    Eigen::Map<RowMajor> dst(out.data().data() + o * N * inner, rows, cols);
    dst.noalias() = M * src;
  }
  return out;
}

/// (E ⊗ ... ⊗ E) k
inline CorrelationTensor apply_tensor_power(const Eigen::MatrixXd& E, CorrelationTensor k) {
  for (int axis = 0; axis < k.order(); ++axis) k = apply_along_axis(E, k, axis);
  return k;
}

}  // namespace contactlab::hierarchy
