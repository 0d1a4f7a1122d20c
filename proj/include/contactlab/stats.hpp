#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace contactlab {

/// Mean/variance accumulator (Welford) with an order-fixed merge.
class RunningStat {
 public:
  void add(double x) noexcept {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  void merge(const RunningStat& other) noexcept {
    if (other.n_ == 0) return;
    if (n_ == 0) {
      *this = other;
      return;
    }
    const double n = static_cast<double>(n_ + other.n_);
    const double delta = other.mean_ - mean_;
    mean_ += delta * static_cast<double>(other.n_) / n;
    m2_ += other.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(other.n_) / n;
    n_ += other.n_;
  }

  std::size_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept {
    return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0;
  }
  double stderr_of_mean() const noexcept {
    return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
  }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double slope_stderr = 0.0;
};

/// Ordinary least squares y = a + b x.
inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = std::min(x.size(), y.size());
  LineFit fit;
  if (n < 2) {
    fit.intercept = n == 1 ? y[0] : 0.0;
    return fit;
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0) {
    fit.intercept = my;
    return fit;
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (n > 2) {
    double rss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      rss += r * r;
    }
    fit.slope_stderr = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
  }
  return fit;
}

/// Weights w with intercept = sum_i w_i y_i for the OLS fit y = a + b x.
/// Lets per-replica extrapolations be averaged so their spread gives an
/// honest standard error.
inline std::vector<double> intercept_weights(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<double> w(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  if (n < 2) return w;
  double mx = 0;
  for (double v : x) mx += v;
  mx /= static_cast<double>(n);
  double sxx = 0;
  for (double v : x) sxx += (v - mx) * (v - mx);
  if (sxx <= 0) return w;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 1.0 / static_cast<double>(n) - mx * (x[i] - mx) / sxx;
  }
  return w;
}

/// Weights w with slope = sum_i w_i y_i for the OLS fit y = a + b x.
inline std::vector<double> slope_weights(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<double> w(n, 0.0);
  if (n < 2) return w;
  double mx = 0;
  for (double v : x) mx += v;
  mx /= static_cast<double>(n);
  double sxx = 0;
  for (double v : x) sxx += (v - mx) * (v - mx);
  if (sxx <= 0) return w;
  for (std::size_t i = 0; i < n; ++i) w[i] = (x[i] - mx) / sxx;
  return w;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

/// log P(N = k) for N ~ Poisson(mean).
inline double poisson_log_pmf(long k, double mean) {
  if (mean == 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return static_cast<double>(k) * std::log(mean) - mean - std::lgamma(static_cast<double>(k) + 1.0);
}

/// P(N <= k) for N ~ Poisson(mean).
inline double poisson_cdf(long k, double mean) {
  if (k < 0) return 0.0;
  double total = 0.0;
  for (long j = 0; j <= k; ++j) total += std::exp(poisson_log_pmf(j, mean));
  return std::min(total, 1.0);
}

}  // namespace contactlab
