#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/errors.hpp"
#include "contactlab/rate_model.hpp"
#include "contactlab/state_space.hpp"

namespace contactlab::criticality {

using model::RateModel;
using model::StateSpace;

enum class Normalization {
  sup_norm,   ///< max Psi = 1
  mark_mass,  ///< sum_s q(s) nu(s) = 1
};

inline const char* to_string(Normalization n) {
  return n == Normalization::sup_norm ? "sup-norm" : "mark-mass";
}

/// Krein-Rutman pair: eigenvalue r and the positive eigenfunction Psi.
struct GroundState {
  Eigen::VectorXd psi;                ///< per point
  double eigenvalue = 1.0;            ///< r
  Normalization normalization = Normalization::sup_norm;
  std::optional<Eigen::VectorXd> mark_q;  ///< q(s) when Psi depends on the mark only
  int iterations = 0;
  double bracket_lo = 0;  ///< Collatz-Wielandt lower bound at exit
  double bracket_hi = 0;  ///< Collatz-Wielandt upper bound at exit
  double residual = 0;    ///< ||T Psi - r Psi||_inf / ||Psi||_inf
};

struct PowerControls {
  double tol = 1e-12;
  int max_iters = 100000;
};

struct Bracket {
  double lo;
  double hi;
};

/// Entries below this fraction of max(Psi) mean the kernel is reducible.
inline constexpr double kPositivityFloor = 1e-12;

struct PerronPair {
  double eigenvalue;
  Eigen::VectorXd vector;  ///< sup-norm 1
  int iterations;
  double lo;
  double hi;
};

/// Power iteration for the Perron root of a non-negative matrix with
/// sup-norm normalization. Stops when the Collatz-Wielandt bracket
/// [min (T v)_i / v_i, max (T v)_i / v_i] is narrower than 2 tol (scaled by
/// max(1, r)); the midpoint is then within tol of every ratio.
inline PerronPair perron_pair(const Eigen::MatrixXd& T, const PowerControls& controls,
                              std::vector<Bracket>* trace = nullptr) {
  const Eigen::Index n = T.rows();
  if (n == 0 || T.cols() != n) throw ModelError("operator must be square and non-empty");
  if (T.minCoeff() < 0.0) throw ModelError("operator has negative entries");
  Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
  for (int it = 1; it <= controls.max_iters; ++it) {
    const Eigen::VectorXd w = T * v;
    const double vmax = v.maxCoeff();
    if (v.minCoeff() <= kPositivityFloor * vmax) {
      throw ConvergenceError("reducible kernel: ground state has entries below the positivity floor");
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double ratio = w(i) / v(i);
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
    if (trace) trace->push_back({lo, hi});
    if (hi <= 0.0) throw ConvergenceError("operator annihilates the positive cone");
    if (0.5 * (hi - lo) <= controls.tol * std::max(1.0, hi)) {
      return {0.5 * (hi + lo), v / vmax, it, lo, hi};
    }
    v = w / w.maxCoeff();
  }
  throw ConvergenceError("power iteration did not converge in " + std::to_string(controls.max_iters) +
                         " iterations (periodic or nearly reducible kernel)");
}

namespace detail {

inline Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

/// Jump out-rate sum_y J(y, x) m(y) per point.
inline Eigen::VectorXd jump_out_rates(const model::Kernel& J, const StateSpace& space) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(idx(space.size()));
  if (auto* f = std::get_if<model::FactorizedKernel>(&J)) {
    for (std::size_t x = 0; x < space.size(); ++x) {
      double m = 0;
      for (std::size_t s = 0; s < space.mark_count(); ++s) {
        m += f->Q(idx(s), idx(space.mark_of(x))) * space.mark_weight(s);
      }
      out(idx(x)) = f->alpha.mass() * m;
    }
    return out;
  }
  if (auto* s = std::get_if<model::StencilKernel>(&J)) {
    out.setConstant(s->alpha.mass());
    return out;
  }
  const auto& a = std::get<model::DenseKernel>(J).values;
  for (std::size_t x = 0; x < space.size(); ++x) {
    double m = 0;
    for (std::size_t y = 0; y < space.size(); ++y) m += a(idx(y), idx(x)) * space.weight(y);
    out(idx(x)) = m;
  }
  return out;
}

/// The mark-space reduction applies to translation-invariant lattice models
/// whose death rates depend on the mark only.
inline bool reducible_to_marks(const RateModel& model, const StateSpace& space) {
  if (!space.is_lattice() || !model::is_translation_invariant(model.birth)) return false;
  if (model.jump && !model::is_translation_invariant(*model.jump)) return false;
  return model::mark_death_rates(model, space).has_value();
}

/// Mark-level blocks: birth part A(s, s') = mass(alpha) Q(s, s') nu(s') and
/// jump part G(s, s') = mass(alpha_J) Q_J(s, s') nu(s').
inline Eigen::MatrixXd mark_block(const model::Kernel& k, const StateSpace& space) {
  const auto M = idx(space.mark_count());
  Eigen::MatrixXd Q = Eigen::MatrixXd::Ones(M, M);
  double mass = 0;
  if (auto* f = std::get_if<model::FactorizedKernel>(&k)) {
    Q = f->Q;
    mass = f->alpha.mass();
  } else {
    mass = std::get<model::StencilKernel>(k).alpha.mass();
  }
  Eigen::MatrixXd out(M, M);
  for (Eigen::Index s = 0; s < M; ++s) {
    for (Eigen::Index t = 0; t < M; ++t) out(s, t) = mass * Q(s, t) * space.mark_weight(static_cast<std::size_t>(t));
  }
  return out;
}

/// T = K^{-1} A with K = diag(V + J_out) - J diag(m) and A = a diag(m).
/// Without jumps K = diag(V). The ground state of T at eigenvalue r makes
/// a / r critical, with jumps included in the balance.
inline Eigen::MatrixXd balance_operator(const Eigen::MatrixXd& A, const Eigen::VectorXd& V,
                                        const Eigen::MatrixXd* G, const Eigen::VectorXd* jump_out) {
  if (!G) return V.cwiseInverse().asDiagonal() * A;
  Eigen::MatrixXd K = -*G;
  K.diagonal() += V + *jump_out;
  const Eigen::MatrixXd Kinv = K.partialPivLu().inverse();
  if (Kinv.minCoeff() < -1e-12 * Kinv.cwiseAbs().maxCoeff()) {
    throw ModelError("jump balance operator is not inverse-positive");
  }
  return Kinv.cwiseMax(0.0) * A;
}

}  // namespace detail

/// Principal eigenpair of (T Psi)(x) = sum_y a(x,y)/V(x) Psi(y) m(y).
///
/// Translation-invariant lattice models with mark-only death rates are
/// reduced to the mark problem with kernel mass(alpha) Q(s, s')/v(s) against
/// nu; the result is then normalized so that sum_s q(s) nu(s) = 1 (product
/// spaces) or max Psi = 1 (plain lattices). Other models are solved densely
/// over the enumerated points with sup-norm normalization.
///
/// When a jump kernel is present the balance includes it: the returned r
/// is the factor by which the birth kernel must be divided so that
/// sum_y (a/r + J)(x,y) Psi(y) m(y) = (V(x) + sum_y J(y,x) m(y)) Psi(x).
inline GroundState solve_ground_state(const RateModel& model, const StateSpace& space,
                                      const PowerControls& controls = {},
                                      std::vector<Bracket>* trace = nullptr) {
  using detail::idx;
  model::check_consistency(model, space);
  if (model.death.minCoeff() <= 0.0) throw ModelError("death rates must be strictly positive");
  if (!(controls.tol > 0.0) || controls.max_iters < 1) throw ModelError("invalid power iteration controls");

  GroundState gs;
  if (detail::reducible_to_marks(model, space)) {
    const auto v = *model::mark_death_rates(model, space);
    const Eigen::MatrixXd A = detail::mark_block(model.birth, space);
    Eigen::MatrixXd T;
    if (model.jump) {
      const Eigen::MatrixXd G = detail::mark_block(*model.jump, space);
      Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
      for (Eigen::Index s = 0; s < v.size(); ++s) {
        // sum over source marks of J's mark block column s
        double m = 0;
        for (Eigen::Index t = 0; t < v.size(); ++t) {
          m += G(t, s) / space.mark_weight(static_cast<std::size_t>(s)) * space.mark_weight(static_cast<std::size_t>(t));
        }
        out(s) = m;
      }
      T = detail::balance_operator(A, v, &G, &out);
    } else {
      T = detail::balance_operator(A, v, nullptr, nullptr);
    }
    auto pair = perron_pair(T, controls, trace);
    Eigen::VectorXd q = pair.vector;
    if (space.kind() == model::SpaceKind::product) {
      double mass = 0;
      for (Eigen::Index s = 0; s < q.size(); ++s) mass += q(s) * space.mark_weight(static_cast<std::size_t>(s));
      q /= mass;
      gs.normalization = Normalization::mark_mass;
    } else {
      gs.normalization = Normalization::sup_norm;
    }
    gs.mark_q = q;
    gs.psi.resize(idx(space.size()));
    for (std::size_t i = 0; i < space.size(); ++i) gs.psi(idx(i)) = q(idx(space.mark_of(i)));
    gs.eigenvalue = pair.eigenvalue;
    gs.iterations = pair.iterations;
    gs.bracket_lo = pair.lo;
    gs.bracket_hi = pair.hi;
    gs.residual = (T * q - pair.eigenvalue * q).cwiseAbs().maxCoeff() / q.cwiseAbs().maxCoeff();
    return gs;
  }

  if (space.is_lattice() && space.boundary() == model::Boundary::unbounded &&
      model::is_translation_invariant(model.birth)) {
    throw ModelError(
        "death rates vary across lattice sites on an unbounded window; use a periodic window");
  }
  const Eigen::MatrixXd a = model::materialize(model.birth, space);
  Eigen::VectorXd m(idx(space.size()));
  for (std::size_t i = 0; i < space.size(); ++i) m(idx(i)) = space.weight(i);
  const Eigen::MatrixXd A = a * m.asDiagonal();
  Eigen::MatrixXd T;
  if (model.jump) {
    const Eigen::MatrixXd G = model::materialize(*model.jump, space) * m.asDiagonal();
    const Eigen::VectorXd out = detail::jump_out_rates(*model.jump, space);
    T = detail::balance_operator(A, model.death, &G, &out);
  } else {
    T = detail::balance_operator(A, model.death, nullptr, nullptr);
  }
  auto pair = perron_pair(T, controls, trace);
  gs.psi = pair.vector;
  gs.normalization = Normalization::sup_norm;
  gs.eigenvalue = pair.eigenvalue;
  gs.iterations = pair.iterations;
  gs.bracket_lo = pair.lo;
  gs.bracket_hi = pair.hi;
  gs.residual = (T * gs.psi - pair.eigenvalue * gs.psi).cwiseAbs().maxCoeff();
  return gs;
}

/// Divides the birth kernel by r; death rates and the jump kernel are kept.
inline RateModel rescale_to_critical(const RateModel& model, const GroundState& gs) {
  if (!(gs.eigenvalue > 0.0) || !std::isfinite(gs.eigenvalue)) {
    throw ModelError("ground-state eigenvalue must be positive");
  }
  RateModel out = model;
  out.birth = model::divide_kernel(model.birth, gs.eigenvalue);
  return out;
}

/// Ground-state transformed model: b(x,y) = a(x,y)/Psi(x), mbar = Psi m,
/// death rates carried over, jump kernel J(x,y)/Psi(x).
class TransformedModel {
 public:
  TransformedModel(StateSpace space, RateModel model, GroundState gs)
      : space_(std::move(space)), model_(std::move(model)), gs_(std::move(gs)) {
    using detail::idx;
    const auto n = space_.size();
    mbar_.resize(idx(n));
    for (std::size_t i = 0; i < n; ++i) mbar_(idx(i)) = gs_.psi(idx(i)) * space_.weight(i);
    translation_invariant_ = detail::reducible_to_marks(model_, space_) && gs_.mark_q.has_value();
    if (n <= kDenseLimit) {
      const Eigen::VectorXd inv_psi = gs_.psi.cwiseInverse();
      b_ = inv_psi.asDiagonal() * model::materialize(model_.birth, space_);
      if (model_.jump) jump_b_ = inv_psi.asDiagonal() * model::materialize(*model_.jump, space_);
    }
    refresh_mark_masses();
  }

  static constexpr std::size_t kDenseLimit = 2000;

  const StateSpace& space() const noexcept { return space_; }
  const RateModel& model() const noexcept { return model_; }
  const GroundState& ground() const noexcept { return gs_; }
  std::size_t size() const noexcept { return space_.size(); }

  double psi(std::size_t i) const { return gs_.psi(detail::idx(i)); }
  double mbar(std::size_t i) const { return mbar_(detail::idx(i)); }
  double death(std::size_t i) const { return model_.death(detail::idx(i)); }
  const Eigen::VectorXd& mbar_vector() const noexcept { return mbar_; }
  const Eigen::VectorXd& death_vector() const noexcept { return model_.death; }
  bool has_jump() const noexcept { return model_.jump.has_value(); }

  /// Translation-invariant lattice model with mark-only Psi and V.
  bool translation_invariant() const noexcept { return translation_invariant_; }

  bool has_dense() const noexcept { return b_.size() > 0; }

  const Eigen::MatrixXd& dense_b() const {
    if (!has_dense()) throw ModelError("space too large for dense kernels");
    return b_;
  }

  /// J(x,y)/Psi(x) as a dense matrix (empty without a jump kernel).
  const Eigen::MatrixXd& dense_jump_b() const {
    if (!has_dense()) throw ModelError("space too large for dense kernels");
    return jump_b_;
  }

  double b(std::size_t x, std::size_t y) const {
    if (has_dense()) return b_(detail::idx(x), detail::idx(y));
    return model::kernel_eval(model_.birth, space_, x, y) / psi(x);
  }

  double jump_b(std::size_t x, std::size_t y) const {
    if (!model_.jump) return 0.0;
    if (has_dense()) return jump_b_(detail::idx(x), detail::idx(y));
    return model::kernel_eval(*model_.jump, space_, x, y) / psi(x);
  }

  /// sum_y b(x,y) mbar(y); exact for unbounded windows of translation-
  /// invariant models, where the enumerated window would truncate the sum.
  double row_mass(std::size_t x) const {
    if (translation_invariant_) return mark_row_mass_(detail::idx(space_.mark_of(x)));
    return b_.row(detail::idx(x)).dot(mbar_);
  }

  /// sum_y b(y,x) mbar(y).
  double column_mass(std::size_t x) const {
    if (translation_invariant_) return mark_column_mass_(detail::idx(space_.mark_of(x)));
    return b_.col(detail::idx(x)).dot(mbar_);
  }

  /// Copy with the birth kernel multiplied by `factor` after the transform.
  TransformedModel with_birth_scaled(double factor) const {
    TransformedModel out = *this;
    out.model_.birth = model::divide_kernel(model_.birth, 1.0 / factor);
    if (out.has_dense()) out.b_ *= factor;
    out.refresh_mark_masses();
    return out;
  }

 private:
  void refresh_mark_masses() {
    if (!translation_invariant_) return;
    const auto& q = *gs_.mark_q;
    const Eigen::MatrixXd A = detail::mark_block(model_.birth, space_);
    mark_row_mass_ = (A * q).cwiseQuotient(q);
    mark_column_mass_.resize(q.size());
    for (Eigen::Index s = 0; s < q.size(); ++s) {
      // b(y,x) mbar(y) = a(y,x) m(y); A(t,s) carries nu(s) instead of nu(t)
      double m = 0;
      for (Eigen::Index t = 0; t < q.size(); ++t) {
        m += A(t, s) / space_.mark_weight(static_cast<std::size_t>(s)) * space_.mark_weight(static_cast<std::size_t>(t));
      }
      mark_column_mass_(s) = m;
    }
  }

  StateSpace space_;
  RateModel model_;
  GroundState gs_;
  Eigen::VectorXd mark_row_mass_;
  Eigen::VectorXd mark_column_mass_;
  Eigen::VectorXd mbar_;
  Eigen::MatrixXd b_;
  Eigen::MatrixXd jump_b_;
  bool translation_invariant_ = false;
};

inline constexpr double kCriticalityTolerance = 1e-8;

/// Builds (b, mbar, V) from a critical model and its ground state.
inline TransformedModel ground_transform(const RateModel& model, const StateSpace& space, const GroundState& gs) {
  if (std::abs(gs.eigenvalue - 1.0) > kCriticalityTolerance) {
    throw ModelError("model is not critical (r = " + std::to_string(gs.eigenvalue) + "); rescale first");
  }
  if (static_cast<std::size_t>(gs.psi.size()) != space.size()) throw ModelError("ground state size mismatch");
  const double top = gs.psi.maxCoeff();
  if (!(gs.psi.minCoeff() >= kPositivityFloor * top) || !(top > 0.0)) {
    throw ModelError("ground state has entries below the positivity floor");
  }
  return TransformedModel(space, model, gs);
}

/// Full pipeline: solve, rescale to r = 1, re-solve, transform.
inline TransformedModel calibrate(const RateModel& model, const StateSpace& space, const PowerControls& controls = {},
                                  GroundState* original = nullptr) {
  GroundState gs = solve_ground_state(model, space, controls);
  if (original) *original = gs;
  RateModel critical = rescale_to_critical(model, gs);
  GroundState gs1 = solve_ground_state(critical, space, controls);
  return ground_transform(critical, space, gs1);
}

/// sup_x |sum_y b(x,y) mbar(y) - V(x)|.
inline double criticality_residual(const TransformedModel& tm) {
  double worst = 0;
  for (std::size_t x = 0; x < tm.size(); ++x) worst = std::max(worst, std::abs(tm.row_mass(x) - tm.death(x)));
  return worst;
}

/// sup_x |sum_y (a+J)(x,y) Psi(y) m(y) - (V(x) + sum_y J(y,x) m(y)) Psi(x)|.
inline double jump_criticality_residual(const RateModel& model, const StateSpace& space, const GroundState& gs) {
  using detail::idx;
  if (detail::reducible_to_marks(model, space) && gs.mark_q) {
    const auto v = *model::mark_death_rates(model, space);
    const auto& q = *gs.mark_q;
    Eigen::VectorXd lhs = detail::mark_block(model.birth, space) * q;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(q.size());
    if (model.jump) {
      const Eigen::MatrixXd G = detail::mark_block(*model.jump, space);
      lhs += G * q;
      for (Eigen::Index s = 0; s < q.size(); ++s) {
        for (Eigen::Index t = 0; t < q.size(); ++t) {
          out(s) += G(t, s) / space.mark_weight(static_cast<std::size_t>(s)) * space.mark_weight(static_cast<std::size_t>(t));
        }
      }
    }
    return (lhs - (v + out).cwiseProduct(q)).cwiseAbs().maxCoeff();
  }
  Eigen::VectorXd m(idx(space.size()));
  for (std::size_t i = 0; i < space.size(); ++i) m(idx(i)) = space.weight(i);
  Eigen::MatrixXd total = model::materialize(model.birth, space);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.size());
  if (model.jump) {
    total += model::materialize(*model.jump, space);
    out = detail::jump_out_rates(*model.jump, space);
  }
  const Eigen::VectorXd lhs = total * m.cwiseProduct(gs.psi);
  return (lhs - (model.death + out).cwiseProduct(gs.psi)).cwiseAbs().maxCoeff();
}

/// Theta(s, s') = mass(alpha) Q(s,s') q(s') / (v(s) q(s)); rows integrate to
/// one against nu on a critical model.
struct ThetaKernel {
  Eigen::MatrixXd theta;
  Eigen::VectorXd nu;
  Eigen::VectorXd v;

  double row_mass(Eigen::Index s) const { return theta.row(s).dot(nu); }
};

inline ThetaKernel theta_kernel(const TransformedModel& tm) {
  const auto& space = tm.space();
  if (!space.is_lattice() || !model::is_translation_invariant(tm.model().birth) || !tm.ground().mark_q) {
    throw ModelError("theta kernel needs a factorized lattice model");
  }
  const auto v = model::mark_death_rates(tm.model(), space);
  if (!v) throw ModelError("theta kernel needs mark-only death rates");
  const auto& q = *tm.ground().mark_q;
  const Eigen::MatrixXd A = detail::mark_block(tm.model().birth, space);
  const auto M = q.size();
  ThetaKernel out;
  out.theta.resize(M, M);
  out.nu.resize(M);
  for (Eigen::Index s = 0; s < M; ++s) out.nu(s) = space.mark_weight(static_cast<std::size_t>(s));
  for (Eigen::Index s = 0; s < M; ++s) {
    for (Eigen::Index t = 0; t < M; ++t) {
      out.theta(s, t) = A(s, t) / out.nu(t) * q(t) / ((*v)(s) * q(s));
    }
  }
  out.v = *v;
  return out;
}

}  // namespace contactlab::criticality
