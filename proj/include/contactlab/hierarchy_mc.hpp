#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "contactlab/errors.hpp"
#include "contactlab/hierarchy.hpp"
#include "contactlab/walkers.hpp"

namespace contactlab::hierarchy {

using walkers::LatticeState;
using walkers::LatticeWalkerModel;

/// Walker model with the symmetrized interaction b(x,y) + b(y,x); the
/// second-order source for k^(1) = rho is rho times this.
class SymmetrizedWalkers {
 public:
  using State = LatticeState;
  explicit SymmetrizedWalkers(const LatticeWalkerModel& m) : m_(m) {}
  double rate(const State& x) const { return m_.rate(x); }
  void jump(State& x, Rng& rng) const { m_.jump(x, rng); }
  double interaction(const State& x, const State& y) const { return m_.interaction(x, y) + m_.interaction(y, x); }

 private:
  const LatticeWalkerModel& m_;
};

struct MonteCarloControls {
  double T = 1000;
  std::size_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  int points_per_decade = 16;
  double t_first = 0.01;
};

/// k^(2) on displacement classes of a translation-invariant lattice model.
struct MonteCarloStationary {
  double rho = 0;
  std::vector<std::string> labels;
  std::vector<std::pair<LatticeState, LatticeState>> starts;
  std::vector<double> values;
  std::vector<double> stderrs;
  walkers::TransienceReport integral;  ///< running integrals of E(b + b~)
};

/// Start pairs (X at displacement u, Y at the origin) for each u and each
/// pair of marks.
inline std::pair<std::vector<std::pair<LatticeState, LatticeState>>, std::vector<std::string>> displacement_starts(
    const LatticeWalkerModel& m, const std::vector<std::vector<long>>& displacements) {
  std::vector<std::pair<LatticeState, LatticeState>> starts;
  std::vector<std::string> labels;
  for (const auto& d : displacements) {
    if (static_cast<int>(d.size()) > m.dim()) throw ModelError("displacement has too many coordinates");
    for (std::size_t sx = 0; sx < m.marks(); ++sx) {
      for (std::size_t sy = 0; sy < m.marks(); ++sy) {
        LatticeState x = m.origin(static_cast<int>(sx));
        LatticeState y = m.origin(static_cast<int>(sy));
        std::string label = "(";
        for (int i = 0; i < m.dim(); ++i) {
          const long c = i < static_cast<int>(d.size()) ? d[static_cast<std::size_t>(i)] : 0;
          x.xi[static_cast<std::size_t>(i)] = c;
          label += (i ? "," : "") + std::to_string(c);
        }
        label += ")";
        if (m.marks() > 1) label += ":" + std::to_string(sx) + ":" + std::to_string(sy);
        starts.emplace_back(x, y);
        labels.push_back(label);
      }
    }
  }
  return {starts, labels};
}

/// Feynman-Kac estimate k^(2)(x, y) = rho^2 + rho int_0^inf E_{x,y}[b(X,Y) + b(Y,X)] dt
/// with the running integral extrapolated by a t^(1 - d/2) tail. Only n <= 2:
/// higher levels need the lower stationary tensor along the walker paths,
/// which this backend does not build. Throws DivergenceError when the
/// integrand does not decay fast enough to be integrable.
inline MonteCarloStationary stationary_k_mc(int n, const LatticeWalkerModel& m, double rho,
                                            const std::vector<std::vector<long>>& displacements,
                                            const MonteCarloControls& c, double epsilon = 0.1) {
  if (n < 1 || n > 2) throw ModelError("the Monte Carlo backend supports n = 1 and n = 2 only");
  if (!(rho > 0)) throw ModelError("rho must be positive");
  MonteCarloStationary out;
  out.rho = rho;
  auto [starts, labels] = displacement_starts(m, displacements);
  out.starts = starts;
  out.labels = labels;
  if (n == 1) {
    out.values.assign(starts.size(), rho);
    out.stderrs.assign(starts.size(), 0.0);
    return out;
  }
  walkers::TransienceControls tc;
  tc.T = c.T;
  tc.replicas = c.replicas;
  tc.seed = c.seed;
  tc.workers = c.workers;
  tc.points_per_decade = c.points_per_decade;
  tc.t_first = c.t_first;
  tc.epsilon = epsilon;
  SymmetrizedWalkers sym(m);
  out.integral = walkers::estimate_H(sym, starts, labels, m.dim(), tc);
  if (!out.integral.converged) {
    nlohmann::json diag = {{"integrand_exponent", out.integral.tail_exponent_fit},
                           {"growth_exponent", out.integral.growth_exponent},
                           {"horizon", c.T}};
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& p : out.integral.pairs) {
      curves.push_back({{"label", p.label}, {"final_integral", p.mean.back()}, {"growth_exponent", p.growth_exponent}});
    }
    diag["pairs"] = curves;
    throw DivergenceError("walker interaction integral does not converge (recurrent lattice)", diag);
  }
  for (const auto& p : out.integral.pairs) {
    out.values.push_back(rho * rho + rho * p.extrapolated);
    out.stderrs.push_back(rho * p.extrapolated_se);
  }
  return out;
}

struct MonteCarloConvergence {
  std::vector<double> times;
  std::vector<double> distances;  ///< max over displacements |k_t - k_rho|
  std::vector<double> stderrs;    ///< combined SE at the maximizing displacement
  bool converged = false;         ///< final distance <= 3 SE and no rise beyond 3 SE
};

/// k_t^(2) = rho^2 + rho int_0^t E(b + b~) ds from the Poisson start, on an
/// independent stream, compared with the stationary estimate.
inline MonteCarloConvergence convergence_check_mc(const LatticeWalkerModel& m, const MonteCarloStationary& st,
                                                  const MonteCarloControls& c) {
  walkers::TransienceControls tc;
  tc.T = c.T;
  tc.replicas = c.replicas;
  tc.seed = c.seed ^ (stream_tag::convergence << 56);
  tc.workers = c.workers;
  tc.points_per_decade = c.points_per_decade;
  tc.t_first = c.t_first;
  SymmetrizedWalkers sym(m);
  const auto run = walkers::estimate_H(sym, st.starts, st.labels, 0, tc);
  MonteCarloConvergence out;
  const double rho = st.rho;
  out.times = run.pairs.front().times;
  for (std::size_t j = 0; j < out.times.size(); ++j) {
    double worst = -1, worst_se = 0;
    for (std::size_t p = 0; p < run.pairs.size(); ++p) {
      const double kt = rho * rho + rho * run.pairs[p].mean[j];
      const double dist = std::abs(kt - st.values[p]);
      if (dist > worst) {
        worst = dist;
        worst_se = std::hypot(rho * run.pairs[p].se[j], st.stderrs[p]);
      }
    }
    out.distances.push_back(worst);
    out.stderrs.push_back(worst_se);
  }
  bool monotone = true;
  for (std::size_t j = 1; j < out.distances.size(); ++j) {
    const double se = std::hypot(out.stderrs[j], out.stderrs[j - 1]);
    if (out.distances[j] > out.distances[j - 1] + 3 * se) monotone = false;
  }
  out.converged = monotone && out.distances.back() <= 3 * out.stderrs.back();
  return out;
}

}  // namespace contactlab::hierarchy
