#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/errors.hpp"
#include "contactlab/state_space.hpp"

namespace contactlab::model {

/// Translation-invariant lattice kernel alpha(u) with finite support.
class Stencil {
 public:
  Stencil() = default;
  explicit Stencil(int dim) : dim_(dim) {}

  /// alpha = 1/(2d) on the 2d unit vectors.
  static Stencil nearest_neighbor(int dim, double total = 1.0) {
    Stencil s(dim);
    for (int k = 0; k < dim; ++k) {
      for (int sign : {-1, 1}) {
        std::vector<int> u(static_cast<std::size_t>(dim), 0);
        u[static_cast<std::size_t>(k)] = sign;
        s.set(u, total / (2.0 * dim));
      }
    }
    return s;
  }

  void set(std::vector<int> offset, double value) {
    if (static_cast<int>(offset.size()) != dim_) throw ModelError("stencil offset has wrong dimension");
    if (!(value >= 0.0) || !std::isfinite(value)) throw ModelError("stencil values must be finite and non-negative");
    if (value == 0.0) {
      entries_.erase(offset);
    } else {
      entries_[std::move(offset)] = value;
    }
  }

  double value(std::span<const int> u) const {
    if (static_cast<int>(u.size()) != dim_) return 0.0;
    auto it = entries_.find(std::vector<int>(u.begin(), u.end()));
    return it == entries_.end() ? 0.0 : it->second;
  }

  int dim() const noexcept { return dim_; }
  const std::map<std::vector<int>, double>& entries() const noexcept { return entries_; }

  double mass() const noexcept {
    double m = 0;
    for (const auto& [u, v] : entries_) m += v;
    return m;
  }

  double sup() const noexcept {
    double m = 0;
    for (const auto& [u, v] : entries_) m = std::max(m, v);
    return m;
  }

  /// Largest |u_k| over the support.
  int radius() const noexcept {
    int r = 0;
    for (const auto& [u, v] : entries_) {
      for (int c : u) r = std::max(r, std::abs(c));
    }
    return r;
  }

  bool is_even() const {
    for (const auto& [u, v] : entries_) {
      std::vector<int> neg(u.size());
      std::transform(u.begin(), u.end(), neg.begin(), [](int c) { return -c; });
      auto it = entries_.find(neg);
      if (it == entries_.end() || it->second != v) return false;
    }
    return true;
  }

  Stencil divided(double divisor) const {
    Stencil s(dim_);
    for (const auto& [u, v] : entries_) s.entries_[u] = v / divisor;
    return s;
  }

 private:
  int dim_ = 0;
  std::map<std::vector<int>, double> entries_;
};

struct DenseKernel {
  Eigen::MatrixXd values;
};

struct StencilKernel {
  Stencil alpha;
};

/// a((xi, s), (xi', s')) = alpha(xi - xi') Q(s, s').
struct FactorizedKernel {
  Stencil alpha;
  Eigen::MatrixXd Q;
};

using Kernel = std::variant<DenseKernel, StencilKernel, FactorizedKernel>;

/// Birth kernel a(x, y), death rates V(x) per point, optional jump kernel J(x, y).
/// Immutable after construction by convention; share freely across workers.
struct RateModel {
  Kernel birth;
  Eigen::VectorXd death;
  std::optional<Kernel> jump;
};

inline bool is_translation_invariant(const Kernel& k) {
  return !std::holds_alternative<DenseKernel>(k);
}

inline const Stencil* stencil_of(const Kernel& k) {
  if (auto* s = std::get_if<StencilKernel>(&k)) return &s->alpha;
  if (auto* f = std::get_if<FactorizedKernel>(&k)) return &f->alpha;
  return nullptr;
}

/// Divide every kernel value by `divisor`: dense payloads entrywise,
/// stencils in alpha, factorized kernels in Q. Division by exactly 1 leaves
/// the payload bitwise unchanged.
inline Kernel divide_kernel(const Kernel& k, double divisor) {
  return std::visit(
      [&](const auto& kern) -> Kernel {
        using T = std::decay_t<decltype(kern)>;
        if constexpr (std::is_same_v<T, DenseKernel>) {
          return DenseKernel{kern.values / divisor};
        } else if constexpr (std::is_same_v<T, StencilKernel>) {
          return StencilKernel{kern.alpha.divided(divisor)};
        } else {
          return FactorizedKernel{kern.alpha, kern.Q / divisor};
        }
      },
      k);
}

inline void check_point(const StateSpace& space, std::size_t x) {
  if (x >= space.size()) throw ModelError("unknown point index " + std::to_string(x));
}

/// a(x, y) for points of `space`.
inline double kernel_eval(const Kernel& k, const StateSpace& space, std::size_t x, std::size_t y) {
  check_point(space, x);
  check_point(space, y);
  return std::visit(
      [&](const auto& kern) -> double {
        using T = std::decay_t<decltype(kern)>;
        if constexpr (std::is_same_v<T, DenseKernel>) {
          return kern.values(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
        } else {
          if (!space.is_lattice()) throw ModelError("stencil kernel on a non-lattice space");
          // alpha is evaluated at xi_x - xi_y
          auto u = space.displacement(y, x);
          const double a = kern.alpha.value(u);
          if constexpr (std::is_same_v<T, FactorizedKernel>) {
            return a * kern.Q(static_cast<Eigen::Index>(space.mark_of(x)),
                              static_cast<Eigen::Index>(space.mark_of(y)));
          } else {
            return a;
          }
        }
      },
      k);
}

inline double kernel_eval(const RateModel& model, const StateSpace& space, std::size_t x, std::size_t y) {
  return kernel_eval(model.birth, space, x, y);
}

/// Dense |X| x |X| matrix of kernel values. Stencil kernels are filled by
/// walking the stencil support from each row point.
inline Eigen::MatrixXd materialize(const Kernel& k, const StateSpace& space) {
  if (auto* d = std::get_if<DenseKernel>(&k)) return d->values;
  const auto n = static_cast<Eigen::Index>(space.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  if (!space.is_lattice()) throw ModelError("stencil kernel on a non-lattice space");
  const Stencil& alpha = *stencil_of(k);
  const auto* f = std::get_if<FactorizedKernel>(&k);
  const int R = space.radius();
  const int L = 2 * R + 1;
  const auto M = space.mark_count();
  std::vector<int> c(static_cast<std::size_t>(space.dim()));
  for (std::size_t site = 0; site < space.site_count(); ++site) {
    auto xc = space.coords(site * M);
    for (const auto& [u, a] : alpha.entries()) {
      // alpha(xi_x - xi_y) = a  =>  xi_y = xi_x - u
      for (std::size_t i = 0; i < c.size(); ++i) {
        int v = xc[i] - u[i];
        if (space.boundary() == Boundary::periodic) v = ((v + R) % L + L) % L - R;
        c[i] = v;
      }
      auto ysite = space.site_index(c);
      if (!ysite) continue;
      for (std::size_t s = 0; s < M; ++s) {
        for (std::size_t t = 0; t < M; ++t) {
          const double q = f ? f->Q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) : 1.0;
          // periodic wrap on tiny windows can map several offsets to one site
          out(static_cast<Eigen::Index>(site * M + s), static_cast<Eigen::Index>(*ysite * M + t)) += a * q;
        }
      }
    }
  }
  return out;
}

/// Sum over marks s of Q(s, s') nu(s), maximized over s'. Column mass of the
/// mark part, used for the regularity bound of factorized kernels.
inline double max_mark_column_mass(const Eigen::MatrixXd& Q, std::span<const double> nu) {
  double best = 0;
  for (Eigen::Index c = 0; c < Q.cols(); ++c) {
    double m = 0;
    for (Eigen::Index r = 0; r < Q.rows(); ++r) m += Q(r, c) * nu[static_cast<std::size_t>(r)];
    best = std::max(best, m);
  }
  return best;
}

/// sup_x sum_y k(y, x) m(y), using translation invariance when available
/// so that unbounded windows are not truncated.
inline double kernel_column_mass(const Kernel& k, const StateSpace& space) {
  if (auto* s = std::get_if<StencilKernel>(&k)) return s->alpha.mass();
  if (auto* f = std::get_if<FactorizedKernel>(&k)) {
    return f->alpha.mass() * max_mark_column_mass(f->Q, space.mark_weights());
  }
  const auto& a = std::get<DenseKernel>(k).values;
  double best = 0;
  for (Eigen::Index x = 0; x < a.cols(); ++x) {
    double m = 0;
    for (Eigen::Index y = 0; y < a.rows(); ++y) m += a(y, x) * space.weight(static_cast<std::size_t>(y));
    best = std::max(best, m);
  }
  return best;
}

/// Shape and structural checks that make the model usable at all.
/// Throws ModelError; the softer standing assumptions are reported by
/// validate_model.
inline void check_consistency(const RateModel& model, const StateSpace& space) {
  if (static_cast<std::size_t>(model.death.size()) != space.size()) {
    throw ModelError("death rate vector has " + std::to_string(model.death.size()) + " entries, space has " +
                     std::to_string(space.size()) + " points");
  }
  auto check_kernel = [&](const Kernel& k, const char* what) {
    std::visit(
        [&](const auto& kern) {
          using T = std::decay_t<decltype(kern)>;
          if constexpr (std::is_same_v<T, DenseKernel>) {
            if (kern.values.rows() != static_cast<Eigen::Index>(space.size()) ||
                kern.values.cols() != static_cast<Eigen::Index>(space.size())) {
              throw ModelError(std::string(what) + " matrix does not match the space size");
            }
            if (!kern.values.allFinite() || kern.values.minCoeff() < 0.0) {
              throw ModelError(std::string(what) + " matrix entries must be finite and non-negative");
            }
          } else {
            if (!space.is_lattice()) throw ModelError(std::string(what) + " stencil requires a lattice space");
            if (kern.alpha.dim() != space.dim()) throw ModelError(std::string(what) + " stencil dimension mismatch");
            if (space.boundary() == Boundary::periodic && kern.alpha.radius() > space.radius()) {
              throw ModelError(std::string(what) + " stencil does not fit in the periodic window");
            }
            if constexpr (std::is_same_v<T, FactorizedKernel>) {
              const auto m = static_cast<Eigen::Index>(space.mark_count());
              if (kern.Q.rows() != m || kern.Q.cols() != m) throw ModelError("Q does not match the mark count");
              if (!kern.Q.allFinite() || kern.Q.minCoeff() <= 0.0) throw ModelError("Q must be strictly positive");
            } else if (space.kind() == SpaceKind::product) {
              throw ModelError("plain stencil on a marked space; use the factorized form");
            }
          }
        },
        k);
  };
  check_kernel(model.birth, "birth");
  if (model.jump) check_kernel(*model.jump, "jump");
}

struct ModelDiagnostics {
  double v_min = 0;
  double v_max = 0;
  double birth_column_mass = 0;
  std::optional<double> jump_column_mass;
  bool death_positive = false;
  bool death_bounded = false;
  bool kernel_mass_finite = false;
  std::vector<std::string> messages;

  bool passed() const noexcept { return death_positive && death_bounded && kernel_mass_finite; }
};

/// Checks V positivity, V boundedness, and finite column mass
/// sup_x sum_y a(y, x) m(y) of the birth (and jump) kernel.
inline ModelDiagnostics validate_model(const RateModel& model, const StateSpace& space) {
  ModelDiagnostics d;
  const auto& V = model.death;
  d.v_min = V.size() ? V.minCoeff() : 0.0;
  d.v_max = V.size() ? V.maxCoeff() : 0.0;
  d.death_positive = V.size() > 0 && d.v_min > 0.0;
  d.death_bounded = V.size() > 0 && V.allFinite();
  if (!d.death_positive) d.messages.push_back("non-positive death rate");
  if (!d.death_bounded) d.messages.push_back("unbounded death rate");
  d.birth_column_mass = kernel_column_mass(model.birth, space);
  d.kernel_mass_finite = std::isfinite(d.birth_column_mass);
  if (model.jump) {
    d.jump_column_mass = kernel_column_mass(*model.jump, space);
    d.kernel_mass_finite = d.kernel_mass_finite && std::isfinite(*d.jump_column_mass);
  }
  if (!d.kernel_mass_finite) d.messages.push_back("kernel column mass is not finite");
  return d;
}

/// Per-mark death rates when V depends on the mark only.
inline std::optional<Eigen::VectorXd> mark_death_rates(const RateModel& model, const StateSpace& space) {
  const auto M = space.mark_count();
  Eigen::VectorXd v(static_cast<Eigen::Index>(M));
  for (std::size_t s = 0; s < M; ++s) v(static_cast<Eigen::Index>(s)) = model.death(static_cast<Eigen::Index>(s));
  for (std::size_t i = 0; i < space.size(); ++i) {
    if (model.death(static_cast<Eigen::Index>(i)) != v(static_cast<Eigen::Index>(space.mark_of(i)))) return std::nullopt;
  }
  return v;
}

}  // namespace contactlab::model
