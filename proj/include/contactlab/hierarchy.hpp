#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <nlohmann/json.hpp>

#include "contactlab/criticality.hpp"
#include "contactlab/errors.hpp"
#include "contactlab/tensor.hpp"

namespace contactlab::hierarchy {

using criticality::TransformedModel;

/// One-particle generator G = B diag(mbar) - diag(V); on a critical model
/// its rows sum to zero.
inline Eigen::MatrixXd level_generator(const TransformedModel& tm) {
  Eigen::MatrixXd G = tm.dense_b() * tm.mbar_vector().asDiagonal();
  G.diagonal() -= tm.death_vector();
  return G;
}

/// Pure-birth part B diag(mbar) of the generator.
inline Eigen::MatrixXd birth_part(const TransformedModel& tm) { return tm.dense_b() * tm.mbar_vector().asDiagonal(); }

inline Eigen::MatrixXd semigroup_matrix(const Eigen::MatrixXd& G, double t) {
  if (t == 0.0) return Eigen::MatrixXd::Identity(G.rows(), G.cols());
  return (G * t).exp();
}

inline void check_extent(const TransformedModel& tm, const CorrelationTensor& k) {
  if (k.extent() != tm.size()) throw ModelError("tensor extent does not match the space");
}

/// -(sum_i V(x_i)) k + sum_i sum_y b(x_i, y) k(.., y, ..) mbar(y)
inline CorrelationTensor apply_Lhat(int n, const TransformedModel& tm, const CorrelationTensor& k) {
  if (k.order() != n || n < 1) throw ModelError("apply_Lhat: tensor order must equal n >= 1");
  check_extent(tm, k);
  const Eigen::MatrixXd G = level_generator(tm);
  CorrelationTensor out(n, k.extent());
  for (int axis = 0; axis < n; ++axis) out += apply_along_axis(G, k, axis);
  return out;
}

/// f(x_1..x_n) = sum_i k_prev(x without x_i) sum_{j != i} b(x_i, x_j); zero for n = 1.
inline CorrelationTensor source_f(int n, const TransformedModel& tm, const CorrelationTensor& k_prev) {
  if (n < 1 || k_prev.order() != n - 1) throw ModelError("source_f: previous tensor must have order n-1");
  const std::size_t N = tm.size();
  CorrelationTensor out(n, N);
  if (n == 1) return out;
  check_extent(tm, k_prev);
  const Eigen::MatrixXd& b = tm.dense_b();
  std::vector<std::size_t> rest(static_cast<std::size_t>(n - 1));
  for (std::size_t f = 0; f < out.size(); ++f) {
    const auto x = out.unflatten(f);
    double total = 0;
    for (int i = 0; i < n; ++i) {
      double bsum = 0;
      for (int j = 0; j < n; ++j) {
        if (j != i) bsum += b(static_cast<Eigen::Index>(x[static_cast<std::size_t>(i)]),
                              static_cast<Eigen::Index>(x[static_cast<std::size_t>(j)]));
      }
      if (bsum == 0.0) continue;
      std::size_t r = 0;
      for (int j = 0; j < n; ++j) {
        if (j != i) rest[r++] = x[static_cast<std::size_t>(j)];
      }
      total += k_prev.at(rest) * bsum;
    }
    out[f] = total;
  }
  return out;
}

/// Constant tensor rho^n (density w.r.t. mbar). Order 0 is the scalar 1.
inline CorrelationTensor poisson_initial(int n, double rho, std::size_t extent) {
  if (n < 0) throw ModelError("order must be non-negative");
  if (n == 0) return CorrelationTensor();
  return CorrelationTensor::constant(n, extent, std::pow(rho, n));
}

/// rho^n prod_i q(x_i): the Poisson start written against m instead of mbar.
inline CorrelationTensor poisson_initial_m_convention(int n, double rho, const Eigen::VectorXd& psi) {
  CorrelationTensor k = poisson_initial(n, rho, static_cast<std::size_t>(psi.size()));
  for (std::size_t f = 0; f < k.size(); ++f) {
    for (auto i : k.unflatten(f)) k[f] *= psi(static_cast<Eigen::Index>(i));
  }
  return k;
}

/// Density against m converted to density against mbar = Psi m.
inline CorrelationTensor to_mbar_convention(CorrelationTensor k, const Eigen::VectorXd& psi) {
  for (std::size_t f = 0; f < k.size(); ++f) {
    for (auto i : k.unflatten(f)) k[f] /= psi(static_cast<Eigen::Index>(i));
  }
  return k;
}

struct EvolveControls {
  double step = 0.05;       ///< initial top-level step
  double tol = 1e-10;       ///< sup-norm error target at output times
  int max_refinements = 8;  ///< step halvings before giving up
};

/// Levels 1..N of k_t at each requested output time.
struct Trajectory {
  std::vector<double> times;
  std::vector<std::vector<CorrelationTensor>> levels;  ///< [time][n-1]
  double error_estimate = 0;
  double step_used = 0;
};

namespace detail {

/// One pass of the coupled exponential-Simpson scheme with top-level step h.
/// Level l steps with h / 2^(N-l), so the half-step nodes of level l are
/// the nodes of level l-1, where the source is available exactly.
inline Trajectory evolve_pass(const TransformedModel& tm, std::vector<CorrelationTensor> state,
                              const std::vector<double>& times, double h) {
  const int N = static_cast<int>(state.size());
  const Eigen::MatrixXd G = level_generator(tm);
  Trajectory traj;
  traj.times = times;
  traj.step_used = h;
  double t = 0;
  std::size_t cache_steps = 0;
  double cache_dt = -1;
  std::vector<std::array<Eigen::MatrixXd, 2>> E(static_cast<std::size_t>(N));
  for (double target : times) {
    const double span = target - t;
    if (span < 0) throw ModelError("output times must be non-decreasing and non-negative");
    if (span > 0) {
      const auto steps = static_cast<std::size_t>(std::ceil(span / h - 1e-12));
      const double dt = span / static_cast<double>(steps);
      if (steps != cache_steps || dt != cache_dt) {
        for (int l = 1; l <= N; ++l) {
          const double hl = std::ldexp(dt, -(N - l));
          E[static_cast<std::size_t>(l - 1)] = {semigroup_matrix(G, hl), semigroup_matrix(G, hl / 2)};
        }
        cache_steps = steps;
        cache_dt = dt;
      }
      // values of the previous level on its node grid
      std::vector<CorrelationTensor> prev_nodes;
      for (int l = 1; l <= N; ++l) {
        const std::size_t nodes = steps << (N - l);
        const double hl = std::ldexp(dt, -(N - l));
        const auto& [Eh, Ehalf] = E[static_cast<std::size_t>(l - 1)];
        std::vector<CorrelationTensor> cur;
        cur.reserve(nodes + 1);
        CorrelationTensor k = state[static_cast<std::size_t>(l - 1)];
        cur.push_back(k);
        for (std::size_t j = 0; j < nodes; ++j) {
          CorrelationTensor next = apply_tensor_power(Eh, k);
          if (l > 1) {
            const auto f0 = source_f(l, tm, prev_nodes[2 * j]);
            const auto fm = source_f(l, tm, prev_nodes[2 * j + 1]);
            const auto f1 = source_f(l, tm, prev_nodes[2 * j + 2]);
            next.axpy(hl / 6, apply_tensor_power(Eh, f0));
            next.axpy(4 * hl / 6, apply_tensor_power(Ehalf, fm));
            next.axpy(hl / 6, f1);
          }
          k = std::move(next);
          cur.push_back(k);
        }
        state[static_cast<std::size_t>(l - 1)] = k;
        prev_nodes = std::move(cur);
      }
      t = target;
    }
    traj.levels.push_back(state);
  }
  return traj;
}

inline double trajectory_distance(const Trajectory& a, const Trajectory& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.levels.size(); ++i) {
    for (std::size_t l = 0; l < a.levels[i].size(); ++l) {
      worst = std::max(worst, (a.levels[i][l] - b.levels[i][l]).sup_norm());
    }
  }
  return worst;
}

}  // namespace detail

/// Solves dk/dt = Lhat_n k + f_t for n = 1..N together, f_t built from the
/// level below. `initial` holds k_0 for n = 1..N. The error estimate comes
/// from step doubling (difference / 15 for a fourth-order scheme); the step
/// is halved until it meets `controls.tol`.
inline Trajectory evolve_hierarchy(const TransformedModel& tm, const std::vector<CorrelationTensor>& initial,
                                   const std::vector<double>& times, const EvolveControls& controls = {}) {
  if (initial.empty()) throw ModelError("evolve needs at least one level");
  for (std::size_t l = 0; l < initial.size(); ++l) {
    if (initial[l].order() != static_cast<int>(l + 1)) throw ModelError("initial tensors must have orders 1..N");
    check_extent(tm, initial[l]);
  }
  if (!(controls.step > 0) || !(controls.tol > 0)) throw ModelError("evolve controls must be positive");
  double h = controls.step;
  Trajectory coarse = detail::evolve_pass(tm, initial, times, h);
  double estimate = 0;
  for (int r = 0; r <= controls.max_refinements; ++r) {
    Trajectory fine = detail::evolve_pass(tm, initial, times, h / 2);
    estimate = detail::trajectory_distance(coarse, fine) / 15.0;
    if (estimate <= controls.tol) {
      fine.error_estimate = estimate;
      return fine;
    }
    coarse = std::move(fine);
    h /= 2;
  }
  throw AccuracyError("evolve could not reach the requested accuracy", estimate);
}

/// Single level with a caller-supplied source f(t); Simpson nodes at
/// t, t + h/2, t + h.
inline std::vector<CorrelationTensor> evolve(int n, const TransformedModel& tm, const CorrelationTensor& k0,
                                             const std::function<CorrelationTensor(double)>& source,
                                             const std::vector<double>& times, const EvolveControls& controls = {}) {
  if (k0.order() != n || n < 1) throw ModelError("evolve: initial tensor must have order n");
  check_extent(tm, k0);
  const Eigen::MatrixXd G = level_generator(tm);
  auto pass = [&](double h) {
    std::vector<CorrelationTensor> out;
    CorrelationTensor k = k0;
    double t = 0;
    for (double target : times) {
      const double span = target - t;
      if (span < 0) throw ModelError("output times must be non-decreasing and non-negative");
      if (span > 0) {
        const auto steps = static_cast<std::size_t>(std::ceil(span / h - 1e-12));
        const double dt = span / static_cast<double>(steps);
        const Eigen::MatrixXd Eh = semigroup_matrix(G, dt);
        const Eigen::MatrixXd Ehalf = semigroup_matrix(G, dt / 2);
        for (std::size_t j = 0; j < steps; ++j) {
          const double s = t + dt * static_cast<double>(j);
          CorrelationTensor next = apply_tensor_power(Eh, k);
          if (source) {
            next.axpy(dt / 6, apply_tensor_power(Eh, source(s)));
            next.axpy(4 * dt / 6, apply_tensor_power(Ehalf, source(s + dt / 2)));
            next.axpy(dt / 6, source(s + dt));
          }
          k = std::move(next);
        }
        t = target;
      }
      out.push_back(k);
    }
    return out;
  };
  double h = controls.step;
  auto coarse = pass(h);
  double estimate = 0;
  for (int r = 0; r <= controls.max_refinements; ++r) {
    auto fine = pass(h / 2);
    estimate = 0;
    for (std::size_t i = 0; i < fine.size(); ++i) estimate = std::max(estimate, (fine[i] - coarse[i]).sup_norm());
    estimate /= 15.0;
    if (estimate <= controls.tol) return fine;
    coarse = std::move(fine);
    h /= 2;
  }
  throw AccuracyError("evolve could not reach the requested accuracy", estimate);
}

struct StationaryControls {
  double t0 = 0.05;        ///< first grid point
  double growth = 1.25;    ///< geometric grid ratio
  double tol = 1e-10;      ///< tail tolerance, relative to max(1, |integral|)
  double t_max = 1e9;      ///< hard horizon
  int divergence_decades = 3;
};

/// Stationary levels n = 1..N with quadrature diagnostics.
struct HierarchySolution {
  double rho = 0;
  std::vector<CorrelationTensor> tensors;            ///< k^(n), index n-1
  std::vector<std::optional<CorrelationTensor>> stderr_;  ///< MC standard errors when available
  std::vector<double> residuals;                     ///< ||Lhat k + f|| per level
  double H_used = 0;
  std::string backend = "dense";
};

namespace detail {

inline constexpr std::array<double, 5> kGaussNodes = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                                      0.5384693101056831, 0.9061798459386640};
inline constexpr std::array<double, 5> kGaussWeights = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                                        0.4786286704993665, 0.2369268850561891};

/// int_0^inf e^{t Lhat} f dt on a geometric grid; throws DivergenceError when
/// per-decade increments stop shrinking.
inline CorrelationTensor semigroup_integral(const Eigen::MatrixXd& G, const CorrelationTensor& f,
                                            const StationaryControls& c) {
  CorrelationTensor total(f.order(), f.extent());
  if (f.sup_norm() == 0.0) return total;
  std::vector<double> decade_ends;
  std::vector<double> decade_increments;
  double decade_end = 10 * c.t0;
  double decade_sum = 0;
  int non_decreasing = 0;
  double prev_inc = -1;
  double a = 0;
  double b = c.t0;
  while (true) {
    CorrelationTensor piece(f.order(), f.extent());
    for (std::size_t q = 0; q < kGaussNodes.size(); ++q) {
      const double t = 0.5 * (a + b) + 0.5 * (b - a) * kGaussNodes[q];
      piece.axpy(0.5 * (b - a) * kGaussWeights[q], apply_tensor_power(semigroup_matrix(G, t), f));
    }
    total += piece;
    const double inc = piece.sup_norm();
    decade_sum += inc;

    if (prev_inc > 0 && inc < prev_inc) {
      const double ratio = inc / prev_inc;
      const double tail = inc * ratio / (1 - ratio);
      if (tail <= c.tol * std::max(1.0, total.sup_norm())) return total;
    }
    prev_inc = inc;

    if (b >= decade_end) {
      if (!decade_increments.empty() && decade_sum >= decade_increments.back()) {
        ++non_decreasing;
      } else {
        non_decreasing = 0;
      }
      decade_ends.push_back(b);
      decade_increments.push_back(decade_sum);
      decade_sum = 0;
      decade_end *= 10;
      if (non_decreasing >= c.divergence_decades) {
        const std::size_t k = decade_increments.size();
        // increments over decade k grow like 10^(k * exponent) when the
        // running integral grows like t^exponent
        const double exponent = std::log10(decade_increments[k - 1] / decade_increments[k - 2]);
        nlohmann::json diag = {{"decade_end_times", decade_ends},
                               {"decade_increments", decade_increments},
                               {"growth_exponent", exponent},
                               {"integral_sup_norm", total.sup_norm()}};
        throw DivergenceError("time integral of the semigroup does not converge (recurrent model)", diag);
      }
    }
    if (b >= c.t_max) throw ConvergenceError("stationary integral did not settle before t_max");
    a = b;
    b *= c.growth;
  }
}

}  // namespace detail

/// Sum_{n>=1} (rho/H)^n / (n!)^2.
inline double factorial_series_D(double rho, double H) {
  if (!(H > 0) || !(rho > 0)) throw ModelError("rho and H must be positive");
  const double z = rho / H;
  double term = 1;
  double sum = 0;
  for (int n = 1; n < 1000; ++n) {
    term *= z / (static_cast<double>(n) * n);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

/// k_rho^(n) = int_0^inf e^{t Lhat_n} f^(n) dt + rho^n for n = 1..N on the
/// dense backend. The reported residual is ||Lhat_n (k - rho^n) + f||, which
/// equals ||Lhat_n k + f|| on a critical model.
inline HierarchySolution stationary_k_dense(const TransformedModel& tm, double rho, int N,
                                            const StationaryControls& controls = {}) {
  if (N < 1) throw ModelError("stationary: N must be at least 1");
  if (!(rho > 0)) throw ModelError("rho must be positive");
  const Eigen::MatrixXd G = level_generator(tm);
  HierarchySolution sol;
  sol.rho = rho;
  sol.tensors.push_back(CorrelationTensor::constant(1, tm.size(), rho));
  sol.stderr_.emplace_back();
  sol.residuals.push_back(0.0);
  for (int n = 2; n <= N; ++n) {
    const auto f = source_f(n, tm, sol.tensors.back());
    CorrelationTensor integral = detail::semigroup_integral(G, f, controls);
    CorrelationTensor r = apply_Lhat(n, tm, integral);
    r += f;
    sol.residuals.push_back(r.sup_norm());
    integral.add_scalar(std::pow(rho, n));
    sol.tensors.push_back(std::move(integral));
    sol.stderr_.emplace_back();
  }
  return sol;
}

struct BoundCheck {
  std::vector<double> ratios;  ///< max_x k^(n) / (D H^n (n!)^2), index n-1
  std::vector<double> ratio_se;
  bool passed = true;
};

/// Bound check on per-level value lists (any point set, e.g. displacement
/// classes); pass iff every max ratio is at most 1 + 3 SE.
inline BoundCheck factorial_bound_check(double rho, double H, const std::vector<std::vector<double>>& values,
                                        const std::vector<std::vector<double>>& stderrs = {}) {
  if (!(H > 0)) throw ModelError("factorial bound check needs a positive H");
  const double D = factorial_series_D(rho, H);
  BoundCheck rep;
  double fact = 1;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    fact *= n;
    const double scale = D * std::pow(H, n) * fact * fact;
    double best = -1;
    double best_se = 0;
    for (std::size_t f = 0; f < values[i].size(); ++f) {
      const double r = values[i][f] / scale;
      if (r > best) {
        best = r;
        best_se = i < stderrs.size() && f < stderrs[i].size() ? stderrs[i][f] / scale : 0.0;
      }
    }
    rep.ratios.push_back(best);
    rep.ratio_se.push_back(best_se);
    if (best > 1 + 3 * best_se) rep.passed = false;
  }
  return rep;
}

inline BoundCheck factorial_bound_check(const HierarchySolution& sol) {
  std::vector<std::vector<double>> values, se;
  for (std::size_t i = 0; i < sol.tensors.size(); ++i) {
    const auto d = sol.tensors[i].data();
    values.emplace_back(d.begin(), d.end());
    if (i < sol.stderr_.size() && sol.stderr_[i]) {
      const auto e = sol.stderr_[i]->data();
      se.emplace_back(e.begin(), e.end());
    } else {
      se.emplace_back();
    }
  }
  return factorial_bound_check(sol.rho, sol.H_used, values, se);
}

struct ConvergenceReport {
  std::vector<double> times;
  std::vector<double> distances;  ///< ||k_t - k_rho|| or, when divergent, ||k_t||
  bool converged = false;
  bool divergent = false;
  nlohmann::json diagnostics;
};

/// ||k_t^(n) - k_rho^(n)||_inf on `times` from the Poisson start, dense backend.
/// On a recurrent model k_rho does not exist; the growth of ||k_t^(n)|| is
/// reported instead and the check is non-convergent.
inline ConvergenceReport convergence_check_dense(int n, const TransformedModel& tm, double rho,
                                                 const std::vector<double>& times,
                                                 const EvolveControls& evolve_controls = {},
                                                 const StationaryControls& stationary_controls = {}) {
  ConvergenceReport rep;
  rep.times = times;
  std::vector<CorrelationTensor> init;
  for (int l = 1; l <= n; ++l) init.push_back(poisson_initial(l, rho, tm.size()));
  const auto traj = evolve_hierarchy(tm, init, times, evolve_controls);
  std::optional<HierarchySolution> sol;
  try {
    sol = stationary_k_dense(tm, rho, n, stationary_controls);
  } catch (const DivergenceError& e) {
    rep.divergent = true;
    rep.diagnostics = e.diagnostics();
  }
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto& kt = traj.levels[i][static_cast<std::size_t>(n - 1)];
    rep.distances.push_back(sol ? (kt - sol->tensors.back()).sup_norm() : kt.sup_norm());
  }
  if (!sol) return rep;
  const double tol = 10 * std::max(evolve_controls.tol, stationary_controls.tol) * std::max(1.0, sol->tensors.back().sup_norm());
  bool decreasing = true;
  for (std::size_t i = 1; i < rep.distances.size(); ++i) {
    if (rep.distances[i] > rep.distances[i - 1] + tol) decreasing = false;
  }
  rep.converged = decreasing;
  rep.diagnostics = {{"final_distance", rep.distances.empty() ? 0.0 : rep.distances.back()}};
  return rep;
}

}  // namespace contactlab::hierarchy
