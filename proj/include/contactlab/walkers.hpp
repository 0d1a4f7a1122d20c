#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/criticality.hpp"
#include "contactlab/errors.hpp"
#include "contactlab/parallel.hpp"
#include "contactlab/random.hpp"
#include "contactlab/stats.hpp"

namespace contactlab::walkers {

using criticality::TransformedModel;
using model::kMaxDim;

namespace detail {

/// Cumulative weights with linear-scan sampling; the laws here have a
/// handful of atoms.
struct Cumulative {
  std::vector<double> cdf;

  void push(double w) { cdf.push_back((cdf.empty() ? 0.0 : cdf.back()) + w); }
  double total() const noexcept { return cdf.empty() ? 0.0 : cdf.back(); }

  std::size_t sample(Rng& rng) const {
    if (cdf.size() == 1) return 0;
    const double u = uniform01(rng) * total();
    for (std::size_t i = 0; i < cdf.size(); ++i) {
      if (u < cdf[i]) return i;
    }
    return cdf.size() - 1;
  }
};

}  // namespace detail

/// Position on the unbounded lattice plus mark.
struct LatticeState {
  std::array<long, kMaxDim> xi{};
  int mark = 0;
};

/// Auxiliary walker for translation-invariant lattice models: from
/// (xi, s) it jumps at rate v(s) (plus the jump out-rate when a jump kernel
/// is present) to (xi - u, s') with u ~ alpha and s' drawn proportional to
/// Q(s, s') q(s') nu(s'), independently of u.
class LatticeWalkerModel {
 public:
  using State = LatticeState;

  explicit LatticeWalkerModel(const TransformedModel& tm, double mass_tol = 1e-8) {
    if (!tm.translation_invariant()) {
      throw ModelError("lattice walkers need a translation-invariant model with mark-only death rates");
    }
    const auto& space = tm.space();
    const auto& model = tm.model();
    dim_ = space.dim();
    marks_ = space.mark_count();
    q_ = *tm.ground().mark_q;
    nu_.resize(static_cast<Eigen::Index>(marks_));
    for (std::size_t s = 0; s < marks_; ++s) nu_(static_cast<Eigen::Index>(s)) = space.mark_weight(s);
    v_ = *model::mark_death_rates(model, space);
    alpha_ = *model::stencil_of(model.birth);
    Q_ = mark_matrix(model.birth);

    add_channel(model.birth);
    Eigen::VectorXd jump_out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(marks_));
    if (model.jump) {
      add_channel(*model.jump);
      const Eigen::MatrixXd QJ = mark_matrix(*model.jump);
      const double mass = model::stencil_of(*model.jump)->mass();
      for (Eigen::Index s = 0; s < jump_out.size(); ++s) jump_out(s) = mass * QJ.col(s).dot(nu_);
    }
    rate_.resize(marks_);
    for (std::size_t s = 0; s < marks_; ++s) {
      rate_[s] = targets_[s].total();
      const double expected = v_(static_cast<Eigen::Index>(s)) + jump_out(static_cast<Eigen::Index>(s));
      if (std::abs(rate_[s] / expected - 1.0) > mass_tol) {
        throw ModelError("walker jump law has mass " + std::to_string(rate_[s] / expected) +
                         " instead of 1; the model is not critical");
      }
    }
    build_interaction_table();
  }

  int dim() const noexcept { return dim_; }
  std::size_t marks() const noexcept { return marks_; }
  const model::Stencil& alpha() const noexcept { return alpha_; }
  const Eigen::MatrixXd& Q() const noexcept { return Q_; }
  const Eigen::VectorXd& q() const noexcept { return q_; }
  const Eigen::VectorXd& nu() const noexcept { return nu_; }
  const Eigen::VectorXd& v() const noexcept { return v_; }

  double rate(const State& x) const { return rate_[static_cast<std::size_t>(x.mark)]; }

  void jump(State& x, Rng& rng) const {
    const auto& law = targets_[static_cast<std::size_t>(x.mark)];
    const std::size_t k = law.sample(rng);
    const auto channel = k / marks_;
    x.mark = static_cast<int>(k % marks_);
    const auto& ch = channels_[channel];
    const auto& u = ch.offsets[ch.law.sample(rng)];
    for (int i = 0; i < dim_; ++i) x.xi[static_cast<std::size_t>(i)] -= u[static_cast<std::size_t>(i)];
  }

  /// b(x, y) = alpha(xi_x - xi_y) Q(s_x, s_y) / q(s_x).
  double interaction(const State& x, const State& y) const {
    std::size_t idx = 0;
    for (int i = dim_ - 1; i >= 0; --i) {
      const long d = x.xi[static_cast<std::size_t>(i)] - y.xi[static_cast<std::size_t>(i)];
      if (d < -radius_ || d > radius_) return 0.0;
      idx = idx * static_cast<std::size_t>(2 * radius_ + 1) + static_cast<std::size_t>(d + radius_);
    }
    return table_[(idx * marks_ + static_cast<std::size_t>(x.mark)) * marks_ + static_cast<std::size_t>(y.mark)];
  }

  /// alpha(xi_x - xi) for a plain position.
  double alpha_at(const State& x, std::span<const long> xi) const {
    std::vector<int> u(static_cast<std::size_t>(dim_));
    for (int i = 0; i < dim_; ++i) {
      u[static_cast<std::size_t>(i)] = static_cast<int>(x.xi[static_cast<std::size_t>(i)] - xi[static_cast<std::size_t>(i)]);
    }
    return alpha_.value(u);
  }

  /// kappa = max Q / min q.
  double kappa() const { return Q_.maxCoeff() / q_.minCoeff(); }

  State origin(int mark = 0) const {
    State s;
    s.mark = mark;
    return s;
  }

 private:
  struct Channel {
    std::vector<std::array<int, kMaxDim>> offsets;
    detail::Cumulative law;
  };

  Eigen::MatrixXd mark_matrix(const model::Kernel& k) const {
    if (auto* f = std::get_if<model::FactorizedKernel>(&k)) return f->Q;
    return Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(marks_), static_cast<Eigen::Index>(marks_));
  }

  void add_channel(const model::Kernel& k) {
    const auto& a = *model::stencil_of(k);
    const Eigen::MatrixXd Q = mark_matrix(k);
    Channel ch;
    for (const auto& [u, w] : a.entries()) {
      std::array<int, kMaxDim> off{};
      std::copy(u.begin(), u.end(), off.begin());
      ch.offsets.push_back(off);
      ch.law.push(w);
    }
    targets_.resize(marks_);
    for (std::size_t s = 0; s < marks_; ++s) {
      for (std::size_t t = 0; t < marks_; ++t) {
        const auto S = static_cast<Eigen::Index>(s);
        const auto T = static_cast<Eigen::Index>(t);
        targets_[s].push(a.mass() * Q(S, T) * q_(T) * nu_(T) / q_(S));
      }
    }
    channels_.push_back(std::move(ch));
  }

  void build_interaction_table() {
    radius_ = alpha_.radius();
    const std::size_t L = static_cast<std::size_t>(2 * radius_ + 1);
    std::size_t cells = 1;
    for (int i = 0; i < dim_; ++i) cells *= L;
    table_.assign(cells * marks_ * marks_, 0.0);
    for (const auto& [u, w] : alpha_.entries()) {
      std::size_t idx = 0;
      for (int i = dim_ - 1; i >= 0; --i) idx = idx * L + static_cast<std::size_t>(u[static_cast<std::size_t>(i)] + radius_);
      for (std::size_t s = 0; s < marks_; ++s) {
        for (std::size_t t = 0; t < marks_; ++t) {
          const auto S = static_cast<Eigen::Index>(s);
          table_[(idx * marks_ + s) * marks_ + t] = w * Q_(S, static_cast<Eigen::Index>(t)) / q_(S);
        }
      }
    }
  }

  int dim_ = 0;
  std::size_t marks_ = 1;
  model::Stencil alpha_;
  Eigen::MatrixXd Q_;
  Eigen::VectorXd q_, nu_, v_;
  std::vector<Channel> channels_;
  std::vector<detail::Cumulative> targets_;  ///< per mark, over (channel, mark)
  std::vector<double> rate_;
  int radius_ = 0;
  std::vector<double> table_;
};

/// Auxiliary walker on an enumerated space: from x it jumps at total rate
/// sum_y (b + b_J)(x, y) mbar(y) to y with probability proportional to the
/// summand.
class FiniteWalkerModel {
 public:
  using State = std::size_t;

  explicit FiniteWalkerModel(const TransformedModel& tm, double mass_tol = 1e-8) : b_(tm.dense_b()) {
    const auto n = tm.size();
    const auto& jb = tm.dense_jump_b();
    laws_.resize(n);
    rate_.resize(n);
    for (std::size_t x = 0; x < n; ++x) {
      double jump_out = 0;
      for (std::size_t y = 0; y < n; ++y) {
        double w = b_(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
        if (jb.size()) {
          w += jb(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
          jump_out += jb(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) * tm.mbar(y);
        }
        laws_[x].push(w * tm.mbar(y));
      }
      rate_[x] = laws_[x].total();
      const double expected = tm.death(x) + jump_out;
      if (std::abs(rate_[x] / expected - 1.0) > mass_tol) {
        throw ModelError("walker jump law has mass " + std::to_string(rate_[x] / expected) +
                         " instead of 1; the model is not critical");
      }
    }
  }

  std::size_t size() const noexcept { return rate_.size(); }
  double rate(State x) const { return rate_[x]; }
  void jump(State& x, Rng& rng) const { x = laws_[x].sample(rng); }
  double interaction(State x, State y) const { return b_(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y)); }

 private:
  Eigen::MatrixXd b_;
  std::vector<detail::Cumulative> laws_;
  std::vector<double> rate_;
};

template <class State>
struct WalkerPath {
  std::vector<double> times;  ///< jump times, strictly increasing
  std::vector<State> states;  ///< states[0] at t = 0, states[i] after jump i
};

/// One walker up to time T.
template <class Model>
WalkerPath<typename Model::State> simulate_jump(const Model& m, typename Model::State x0, double T, Rng& rng) {
  WalkerPath<typename Model::State> path;
  path.states.push_back(x0);
  double t = 0;
  auto x = x0;
  while (true) {
    t += exponential(rng, m.rate(x));
    if (t >= T) break;
    m.jump(x, rng);
    path.times.push_back(t);
    path.states.push_back(x);
  }
  return path;
}

/// Two independent walkers from (x, y) up to time T, run as one process with
/// the superposed clock. Calls vis.interval(t0, t1, X, Y) for every holding
/// interval and vis.jump(t, which) with which = 0 for X and 1 for Y.
template <class Model, class Visitor>
void run_pair(const Model& m, typename Model::State x, typename Model::State y, double T, Rng& rng, Visitor& vis) {
  double t = 0;
  while (true) {
    const double rx = m.rate(x);
    const double total = rx + m.rate(y);
    const double next = t + exponential(rng, total);
    if (next >= T) {
      vis.interval(t, T, x, y);
      return;
    }
    vis.interval(t, next, x, y);
    if (uniform01(rng) * total < rx) {
      m.jump(x, rng);
      vis.jump(next, 0);
    } else {
      m.jump(y, rng);
      vis.jump(next, 1);
    }
    t = next;
  }
}

/// Geometric checkpoints from t_first to T (T included).
inline std::vector<double> geometric_grid(double t_first, double T, int per_decade) {
  if (!(t_first > 0) || !(T > t_first) || per_decade < 1) throw ModelError("invalid time grid");
  std::vector<double> g;
  const double ratio = std::pow(10.0, 1.0 / per_decade);
  for (double t = t_first; t < T * (1 - 1e-12); t *= ratio) g.push_back(t);
  g.push_back(T);
  return g;
}

struct TransienceControls {
  double T = 1000;
  std::size_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  int points_per_decade = 16;
  double t_first = 0.01;
  double epsilon = 0.1;  ///< integrability margin on the integrand exponent
};

/// Running integral of E b(X_t, Y_t) for one start pair.
struct PairEstimate {
  std::string label;
  std::vector<double> times;
  std::vector<double> mean;  ///< E int_0^t b dt at each checkpoint
  std::vector<double> se;
  double extrapolated = 0;  ///< value at infinity (tail fit with fixed exponent)
  double extrapolated_se = 0;
  double integrand_exponent = 0;  ///< free fit of d/dt E int b over the last decade
  double growth_exponent = 0;     ///< free fit of log I vs log t over the last decade
  std::size_t monotonic_violations = 0;
};

struct TransienceReport {
  double H_hat = 0;
  double stderr_ = 0;
  double tail_exponent_fit = 0;  ///< worst integrand exponent over pairs
  double growth_exponent = 0;    ///< worst running-integral growth exponent
  double horizon = 0;
  bool converged = false;
  std::string variant = "full";
  std::vector<PairEstimate> pairs;
  std::size_t monotonic_violations = 0;
};

namespace detail {

/// Log-log slope over points with positive y; -inf when none are positive.
inline double loglog_slope(const std::vector<double>& t, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (y[i] > 0) {
      lx.push_back(std::log(t[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 2) return -std::numeric_limits<double>::infinity();
  return fit_line(lx, ly).slope;
}

struct PairAccumulator {
  std::vector<RunningStat> at;
  RunningStat intercept;
  std::size_t violations = 0;

  void merge(const PairAccumulator& o) {
    for (std::size_t i = 0; i < at.size(); ++i) at[i].merge(o.at[i]);
    intercept.merge(o.intercept);
    violations += o.violations;
  }
};

template <class Model>
struct IntegralVisitor {
  using State = typename Model::State;
  const std::vector<double>* grid;
  std::vector<double>* values;
  const Model* m;
  std::size_t next = 0;
  double integral = 0;

  void interval(double t0, double t1, const State& x, const State& y) {
    const double bv = m->interaction(x, y);
    while (next < grid->size() && (*grid)[next] <= t1) {
      (*values)[next] = integral + bv * ((*grid)[next] - t0);
      ++next;
    }
    integral += bv * (t1 - t0);
  }
  void jump(double, int) {}
};

}  // namespace detail

/// Estimates sup over start pairs of int_0^inf E b(X_t, Y_t) dt.
///
/// For lattice models with d >= 3 the running integral is extrapolated with
/// I(t) = I_inf + beta t^(1 - d/2) fitted over the last decade of
/// checkpoints; otherwise I_inf is the value at T. H_hat is the largest
/// I_inf + 3 SE. The verdict uses a free fit of the integrand exponent.
template <class Model>
TransienceReport estimate_H(const Model& m,
                            const std::vector<std::pair<typename Model::State, typename Model::State>>& starts,
                            const std::vector<std::string>& labels, int dim, const TransienceControls& c) {
  using State = typename Model::State;
  if (starts.empty()) throw ModelError("estimate_H needs at least one start pair");
  if (c.replicas < 2) throw ModelError("estimate_H needs at least two replicas");
  const auto grid = geometric_grid(c.t_first, c.T, c.points_per_decade);
  std::vector<std::size_t> last;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (grid[j] >= c.T / 10 * (1 - 1e-12)) last.push_back(j);
  }
  const bool extrapolate = dim >= 3;
  std::vector<double> wts;
  if (extrapolate) {
    std::vector<double> x;
    for (auto j : last) x.push_back(std::pow(grid[j], 1.0 - dim / 2.0));
    wts = intercept_weights(x);
  }

  TransienceReport rep;
  rep.horizon = c.T;
  rep.H_hat = 0;
  rep.tail_exponent_fit = -std::numeric_limits<double>::infinity();
  rep.growth_exponent = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < starts.size(); ++p) {
    detail::PairAccumulator proto;
    proto.at.resize(grid.size());
    auto acc = run_replicas(c.replicas, c.workers, proto, [&](std::size_t r, detail::PairAccumulator& a) {
      Rng rng = make_stream(c.seed, r, stream_tag::transience * 1000003ULL + p);
      std::vector<double> values(grid.size(), 0.0);
      detail::IntegralVisitor<Model> vis{&grid, &values, &m};
      run_pair(m, starts[p].first, starts[p].second, c.T, rng, vis);
      for (std::size_t j = 0; j < grid.size(); ++j) {
        a.at[j].add(values[j]);
        if (j && values[j] < values[j - 1]) ++a.violations;
      }
      if (extrapolate) {
        double v = 0;
        for (std::size_t i = 0; i < last.size(); ++i) v += wts[i] * values[last[i]];
        a.intercept.add(v);
      }
    });
    PairEstimate est;
    est.label = p < labels.size() ? labels[p] : std::to_string(p);
    est.times = grid;
    for (const auto& s : acc.at) {
      est.mean.push_back(s.mean());
      est.se.push_back(s.stderr_of_mean());
    }
    if (extrapolate) {
      est.extrapolated = acc.intercept.mean();
      est.extrapolated_se = acc.intercept.stderr_of_mean();
    } else {
      est.extrapolated = est.mean.back();
      est.extrapolated_se = est.se.back();
    }
    std::vector<double> tm, g, tl, il;
    for (std::size_t i = 0; i + 1 < last.size(); ++i) {
      const auto j = last[i], k = last[i + 1];
      tm.push_back(std::sqrt(grid[j] * grid[k]));
      g.push_back((est.mean[k] - est.mean[j]) / (grid[k] - grid[j]));
    }
    for (auto j : last) {
      tl.push_back(grid[j]);
      il.push_back(est.mean[j]);
    }
    est.integrand_exponent = detail::loglog_slope(tm, g);
    est.growth_exponent = detail::loglog_slope(tl, il);
    est.monotonic_violations = acc.violations;
    rep.monotonic_violations += acc.violations;

    const double upper = est.extrapolated + 3 * est.extrapolated_se;
    if (p == 0 || upper > rep.H_hat) {
      rep.H_hat = std::max(0.0, upper);
      rep.stderr_ = est.extrapolated_se;
    }
    rep.tail_exponent_fit = std::max(rep.tail_exponent_fit, est.integrand_exponent);
    rep.growth_exponent = std::max(rep.growth_exponent, est.growth_exponent);
    rep.pairs.push_back(std::move(est));
  }
  rep.converged = rep.tail_exponent_fit <= -1.0 - c.epsilon;
  return rep;
}

/// Default start pairs for lattice walkers: X at displacement u from Y at
/// the origin, u in {0, e1, 2 e1, e1 + e2}, for every pair of marks.
inline std::pair<std::vector<std::pair<LatticeState, LatticeState>>, std::vector<std::string>> default_lattice_starts(
    const LatticeWalkerModel& m) {
  std::vector<std::vector<long>> disp = {{0}, {1}, {2}};
  if (m.dim() >= 2) disp.push_back({1, 1});
  std::vector<std::pair<LatticeState, LatticeState>> starts;
  std::vector<std::string> labels;
  for (const auto& d : disp) {
    for (std::size_t sx = 0; sx < m.marks(); ++sx) {
      for (std::size_t sy = 0; sy < m.marks(); ++sy) {
        LatticeState x = m.origin(static_cast<int>(sx));
        LatticeState y = m.origin(static_cast<int>(sy));
        std::string label = "u=(";
        for (int i = 0; i < m.dim(); ++i) {
          const long c = i < static_cast<int>(d.size()) ? d[static_cast<std::size_t>(i)] : 0;
          x.xi[static_cast<std::size_t>(i)] = c;
          label += (i ? "," : "") + std::to_string(c);
        }
        label += ")";
        if (m.marks() > 1) label += " s=" + std::to_string(sx) + "," + std::to_string(sy);
        starts.emplace_back(x, y);
        labels.push_back(label);
      }
    }
  }
  return {starts, labels};
}

/// All ordered pairs of points of a finite space.
inline std::pair<std::vector<std::pair<std::size_t, std::size_t>>, std::vector<std::string>> all_finite_starts(
    const FiniteWalkerModel& m) {
  std::vector<std::pair<std::size_t, std::size_t>> starts;
  std::vector<std::string> labels;
  for (std::size_t x = 0; x < m.size(); ++x) {
    for (std::size_t y = 0; y < m.size(); ++y) {
      starts.emplace_back(x, y);
      labels.push_back(std::to_string(x) + "," + std::to_string(y));
    }
  }
  return {starts, labels};
}

struct SufficientControls {
  double T = 100;
  std::size_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  int points_per_decade = 8;
  double t_first = 0.01;
  double epsilon = 0.1;
  int target_radius = 2;  ///< sup over targets y within this box around the start
};

/// int_0^inf sup_{x,y} E_x b(X_t, y) dt for lattice walkers.
///
/// By translation invariance x is the origin with each start mark. The sup
/// over y is taken over a box of `target_radius` around the start; the
/// walks are symmetric about their start for even stencils, where the sup
/// is attained near it. Time integral by the trapezoid rule on the
/// checkpoint grid plus a c t^(-d/2) tail; SE from batch means over replica
/// blocks.
inline TransienceReport estimate_H_sufficient(const LatticeWalkerModel& m, const SufficientControls& c) {
  const int d = m.dim();
  const int rb = c.target_radius + m.alpha().radius();
  const std::size_t L = static_cast<std::size_t>(2 * rb + 1);
  std::size_t box = 1;
  for (int i = 0; i < d; ++i) box *= L;
  const std::size_t M = m.marks();
  const auto grid = geometric_grid(c.t_first, c.T, c.points_per_decade);
  const std::size_t cells = M * grid.size() * box * M;  // [s0][t][xi][s]

  struct Batches {
    std::vector<std::vector<double>> hist;  ///< one histogram per replica block
    std::vector<std::size_t> count;
    void merge(const Batches& o) {
      hist.insert(hist.end(), o.hist.begin(), o.hist.end());
      count.insert(count.end(), o.count.begin(), o.count.end());
    }
  };
  auto acc = run_replicas(c.replicas, c.workers, Batches{}, [&](std::size_t r, Batches& b) {
    if (b.hist.empty()) {
      b.hist.emplace_back(cells, 0.0);
      b.count.push_back(0);
    }
    auto& h = b.hist.back();
    ++b.count.back();
    for (std::size_t s0 = 0; s0 < M; ++s0) {
      Rng rng = make_stream(c.seed, r, stream_tag::sufficient * 1000003ULL + s0);
      LatticeState x = m.origin(static_cast<int>(s0));
      double t = 0;
      std::size_t j = 0;
      while (j < grid.size()) {
        const double next = t + exponential(rng, m.rate(x));
        while (j < grid.size() && grid[j] < next) {
          std::size_t idx = 0;
          bool inside = true;
          for (int i = 0; i < d; ++i) {
            const long v = x.xi[static_cast<std::size_t>(i)];
            if (v < -rb || v > rb) inside = false;
            idx = idx * L + static_cast<std::size_t>(v + rb);
          }
          if (inside) h[((s0 * grid.size() + j) * box + idx) * M + static_cast<std::size_t>(x.mark)] += 1;
          ++j;
        }
        m.jump(x, rng);
        t = next;
      }
    }
  });

  // sup over y of E_x b(X_t, y) from a histogram
  auto sup_curve = [&](const std::vector<double>& h, double n) {
    std::vector<double> g(grid.size(), 0.0);
    std::vector<long> eta(static_cast<std::size_t>(d));
    LatticeState xs, ys;
    for (std::size_t s0 = 0; s0 < M; ++s0) {
      for (std::size_t j = 0; j < grid.size(); ++j) {
        const double* base = h.data() + (s0 * grid.size() + j) * box * M;
        for (std::size_t e = 0; e < static_cast<std::size_t>(std::pow(2 * c.target_radius + 1, d)); ++e) {
          std::size_t rest = e;
          for (int i = d - 1; i >= 0; --i) {
            ys.xi[static_cast<std::size_t>(i)] = static_cast<long>(rest % static_cast<std::size_t>(2 * c.target_radius + 1)) - c.target_radius;
            rest /= static_cast<std::size_t>(2 * c.target_radius + 1);
          }
          for (std::size_t t1 = 0; t1 < M; ++t1) {
            ys.mark = static_cast<int>(t1);
            double val = 0;
            for (std::size_t cell = 0; cell < box; ++cell) {
              std::size_t r2 = cell;
              for (int i = d - 1; i >= 0; --i) {
                xs.xi[static_cast<std::size_t>(i)] = static_cast<long>(r2 % L) - rb;
                r2 /= L;
              }
              for (std::size_t s = 0; s < M; ++s) {
                const double cnt = base[cell * M + s];
                if (cnt == 0) continue;
                xs.mark = static_cast<int>(s);
                val += cnt * m.interaction(xs, ys);
              }
            }
            g[j] = std::max(g[j], val / n);
          }
        }
      }
    }
    return g;
  };
  double sup_b0 = 0;  // t = 0: walker sits at its start
  for (std::size_t s0 = 0; s0 < M; ++s0) {
    for (std::size_t t1 = 0; t1 < M; ++t1) {
      for (const auto& [u, w] : m.alpha().entries()) {
        LatticeState xs = m.origin(static_cast<int>(s0));
        LatticeState ys = m.origin(static_cast<int>(t1));
        for (int i = 0; i < d; ++i) ys.xi[static_cast<std::size_t>(i)] = -u[static_cast<std::size_t>(i)];
        if (std::abs(ys.xi[0]) <= c.target_radius) sup_b0 = std::max(sup_b0, m.interaction(xs, ys));
      }
    }
  }
  std::vector<std::size_t> last;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (grid[j] >= c.T / 10 * (1 - 1e-12)) last.push_back(j);
  }
  auto integrate = [&](const std::vector<double>& g) {
    double total = 0.5 * (sup_b0 + g[0]) * grid[0];
    for (std::size_t j = 1; j < grid.size(); ++j) total += 0.5 * (g[j] + g[j - 1]) * (grid[j] - grid[j - 1]);
    if (d >= 3) {
      double cfit = 0;
      for (auto j : last) cfit += g[j] * std::pow(grid[j], d / 2.0);
      cfit /= static_cast<double>(last.size());
      total += cfit * std::pow(c.T, 1.0 - d / 2.0) / (d / 2.0 - 1.0);
    }
    return total;
  };

  std::vector<double> sum(cells, 0.0);
  std::size_t n = 0;
  RunningStat batches;
  for (std::size_t b = 0; b < acc.hist.size(); ++b) {
    for (std::size_t i = 0; i < cells; ++i) sum[i] += acc.hist[b][i];
    n += acc.count[b];
    batches.add(integrate(sup_curve(acc.hist[b], static_cast<double>(acc.count[b]))));
  }
  const auto g = sup_curve(sum, static_cast<double>(n));
  TransienceReport rep;
  rep.variant = "sufficient";
  rep.horizon = c.T;
  const double value = integrate(g);
  rep.stderr_ = batches.stderr_of_mean();
  rep.H_hat = value + 3 * rep.stderr_;
  std::vector<double> tl, gl;
  for (auto j : last) {
    tl.push_back(grid[j]);
    gl.push_back(g[j]);
  }
  rep.tail_exponent_fit = detail::loglog_slope(tl, gl);
  rep.growth_exponent = rep.tail_exponent_fit + 1;
  rep.converged = d >= 3 && rep.tail_exponent_fit <= -1.0 - c.epsilon;
  PairEstimate curve;
  curve.label = "sup_xy E_x b(X_t, y)";
  curve.times = grid;
  curve.mean = g;
  curve.se.assign(g.size(), 0.0);
  curve.extrapolated = value;
  curve.extrapolated_se = rep.stderr_;
  curve.integrand_exponent = rep.tail_exponent_fit;
  rep.pairs.push_back(std::move(curve));
  return rep;
}

struct HeatControls {
  std::vector<double> times;  ///< increasing, positive
  std::size_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  int start_mark = 0;
  std::vector<long> target;  ///< xi_1 relative to xi_0 = 0
};

struct HeatReport {
  std::vector<double> times;
  std::vector<double> singular;     ///< e^{-v(s0) t} alpha(xi0 - xi1)
  std::vector<double> regular;      ///< E[alpha(xi(t) - xi1); n(t) >= 1]
  std::vector<double> regular_se;
  std::vector<double> estimate;     ///< kappa (singular + regular)
  std::vector<double> scaled;       ///< estimate t^{d/2}
  std::vector<double> scaled_se;
  std::vector<double> eb;           ///< max over s1 of E_x b(X_t, (xi1, s1))
  std::vector<double> eb_se;
  std::vector<double> zero_jump;    ///< fraction with no jump by t
  std::vector<double> zero_jump_se;
  double kappa = 0;
  double sup_scaled = 0;
  double slope = 0;  ///< d scaled / d log t over the last decade
  double slope_se = 0;
  bool flat = false;      ///< |slope| <= 3 SE
  bool bound_ok = false;  ///< eb <= estimate + 3 SE everywhere
  bool passed() const noexcept { return flat && bound_ok; }
};

/// Checks E_x b(X_t, y) <= kappa E alpha(xi(t) - xi1) and that
/// kappa E alpha(xi(t) - xi1) t^{d/2} stays flat over the last decade of
/// the grid. The zero-jump part is exact, the rest is Monte Carlo.
inline HeatReport heat_bound_check(const LatticeWalkerModel& m, const HeatControls& c) {
  if (c.times.empty() || c.times.front() <= 0) throw ModelError("heat check needs positive times");
  if (!std::is_sorted(c.times.begin(), c.times.end())) throw ModelError("heat check times must increase");
  const int d = m.dim();
  const std::size_t M = m.marks();
  const std::size_t G = c.times.size();
  std::vector<long> target = c.target;
  target.resize(static_cast<std::size_t>(d), 0);
  LatticeState y = m.origin();
  for (int i = 0; i < d; ++i) y.xi[static_cast<std::size_t>(i)] = target[static_cast<std::size_t>(i)];
  const LatticeState x0 = m.origin(c.start_mark);
  const double kappa = m.kappa();
  const double T = c.times.back();
  std::vector<std::size_t> last;
  for (std::size_t j = 0; j < G; ++j) {
    if (c.times[j] >= T / 10 * (1 - 1e-12)) last.push_back(j);
  }
  std::vector<double> logt;
  for (auto j : last) logt.push_back(std::log(c.times[j]));
  const auto sw = slope_weights(logt);

  struct Acc {
    std::vector<RunningStat> reg, zero, slope;
    std::vector<RunningStat> eb;  ///< [j][s1]
    void merge(const Acc& o) {
      for (std::size_t i = 0; i < reg.size(); ++i) reg[i].merge(o.reg[i]);
      for (std::size_t i = 0; i < zero.size(); ++i) zero[i].merge(o.zero[i]);
      for (std::size_t i = 0; i < eb.size(); ++i) eb[i].merge(o.eb[i]);
      slope[0].merge(o.slope[0]);
    }
  };
  Acc proto;
  proto.reg.resize(G);
  proto.zero.resize(G);
  proto.eb.resize(G * M);
  proto.slope.resize(1);
  const double v0 = m.v()(c.start_mark);
  const double a0 = m.alpha_at(x0, y.xi);
  auto acc = run_replicas(c.replicas, c.workers, proto, [&](std::size_t r, Acc& a) {
    Rng rng = make_stream(c.seed, r, stream_tag::heat);
    LatticeState x = x0;
    double t = 0;
    std::size_t j = 0;
    bool jumped = false;
    double slope = 0;
    while (j < G) {
      const double next = t + exponential(rng, m.rate(x));
      while (j < G && c.times[j] < next) {
        const double reg = jumped ? m.alpha_at(x, y.xi) : 0.0;
        a.reg[j].add(reg);
        a.zero[j].add(jumped ? 0.0 : 1.0);
        for (std::size_t s1 = 0; s1 < M; ++s1) {
          LatticeState ys = y;
          ys.mark = static_cast<int>(s1);
          a.eb[j * M + s1].add(m.interaction(x, ys));
        }
        const auto it = std::find(last.begin(), last.end(), j);
        if (it != last.end()) {
          const double sing = std::exp(-v0 * c.times[j]) * a0;
          slope += sw[static_cast<std::size_t>(it - last.begin())] * kappa * (sing + reg) * std::pow(c.times[j], d / 2.0);
        }
        ++j;
      }
      m.jump(x, rng);
      jumped = true;
      t = next;
    }
    a.slope[0].add(slope);
  });

  HeatReport rep;
  rep.times = c.times;
  rep.kappa = kappa;
  rep.bound_ok = true;
  for (std::size_t j = 0; j < G; ++j) {
    const double t = c.times[j];
    const double sing = std::exp(-v0 * t) * a0;
    const double scale = std::pow(t, d / 2.0);
    rep.singular.push_back(sing);
    rep.regular.push_back(acc.reg[j].mean());
    rep.regular_se.push_back(acc.reg[j].stderr_of_mean());
    rep.estimate.push_back(kappa * (sing + acc.reg[j].mean()));
    rep.scaled.push_back(rep.estimate.back() * scale);
    rep.scaled_se.push_back(kappa * acc.reg[j].stderr_of_mean() * scale);
    double best = 0, best_se = 0;
    for (std::size_t s1 = 0; s1 < M; ++s1) {
      if (acc.eb[j * M + s1].mean() >= best) {
        best = acc.eb[j * M + s1].mean();
        best_se = acc.eb[j * M + s1].stderr_of_mean();
      }
    }
    rep.eb.push_back(best);
    rep.eb_se.push_back(best_se);
    rep.zero_jump.push_back(acc.zero[j].mean());
    rep.zero_jump_se.push_back(acc.zero[j].stderr_of_mean());
    if (best > rep.estimate.back() + 3 * std::hypot(best_se, rep.regular_se.back() * kappa)) rep.bound_ok = false;
    rep.sup_scaled = std::max(rep.sup_scaled, rep.scaled.back());
  }
  rep.slope = acc.slope[0].mean();
  rep.slope_se = acc.slope[0].stderr_of_mean();
  rep.flat = last.size() >= 2 && std::abs(rep.slope) <= 3 * rep.slope_se;
  return rep;
}

struct ConvolutionReport {
  std::vector<double> sup;         ///< sup_xi alpha^{*n}(xi), index n-1
  std::vector<double> scaled;      ///< sup * n^{d/2}
  std::vector<double> at_origin;   ///< alpha^{*n}(0)
  double max_scaled = 0;
  double median_scaled = 0;
  double mass_deficit = 0;  ///< worst |1 - sum alpha^{*n}|
  bool passed() const noexcept { return max_scaled <= 2 * median_scaled; }
};

/// Exact iterated convolutions alpha^{*n}, n = 1..n_max. The window grows by
/// the stencil radius each step, so it always holds the full support.
inline ConvolutionReport convolution_bound_check(const model::Stencil& alpha, int n_max) {
  const int d = alpha.dim();
  if (d < 1 || d > kMaxDim) throw ModelError("stencil dimension out of range");
  if (n_max < 1) throw ModelError("n_max must be at least 1");
  if (std::abs(alpha.mass() - 1.0) > 1e-12) throw ModelError("convolution check needs a normalized stencil");
  const int r = alpha.radius();
  if (std::pow(2.0 * r * n_max + 1, d) > 5e7) throw ModelError("convolution window too large");
  struct Entry {
    std::array<int, kMaxDim> u;
    double w;
  };
  std::vector<Entry> ent;
  for (const auto& [u, w] : alpha.entries()) {
    Entry e{{}, w};
    std::copy(u.begin(), u.end(), e.u.begin());
    ent.push_back(e);
  }
  auto index = [d](const std::array<int, kMaxDim>& c, int R) {
    std::size_t idx = 0;
    const auto L = static_cast<std::size_t>(2 * R + 1);
    for (int i = 0; i < d; ++i) idx = idx * L + static_cast<std::size_t>(c[static_cast<std::size_t>(i)] + R);
    return idx;
  };
  auto size_of = [d](int R) {
    std::size_t n = 1;
    for (int i = 0; i < d; ++i) n *= static_cast<std::size_t>(2 * R + 1);
    return n;
  };
  ConvolutionReport rep;
  // n = 1
  int R = r;
  std::vector<double> cur(size_of(R), 0.0);
  for (const auto& e : ent) cur[index(e.u, R)] += e.w;
  for (int n = 1;; ++n) {
    double sup = 0, mass = 0;
    for (double v : cur) {
      sup = std::max(sup, v);
      mass += v;
    }
    rep.sup.push_back(sup);
    rep.scaled.push_back(sup * std::pow(n, d / 2.0));
    rep.at_origin.push_back(cur[index({}, R)]);
    rep.mass_deficit = std::max(rep.mass_deficit, std::abs(1.0 - mass));
    if (n == n_max) break;
    const int R2 = R + r;
    std::vector<double> nxt(size_of(R2), 0.0);
    std::array<int, kMaxDim> c{};
    const auto L = static_cast<std::size_t>(2 * R + 1);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (cur[i] == 0) continue;
      std::size_t rest = i;
      for (int k = d - 1; k >= 0; --k) {
        c[static_cast<std::size_t>(k)] = static_cast<int>(rest % L) - R;
        rest /= L;
      }
      for (const auto& e : ent) {
        std::array<int, kMaxDim> c2{};
        for (int k = 0; k < d; ++k) c2[static_cast<std::size_t>(k)] = c[static_cast<std::size_t>(k)] + e.u[static_cast<std::size_t>(k)];
        nxt[index(c2, R2)] += cur[i] * e.w;
      }
    }
    cur = std::move(nxt);
    R = R2;
  }
  if (rep.mass_deficit > 1e-9) throw AccuracyError("convolution lost mass", rep.mass_deficit);
  rep.max_scaled = *std::max_element(rep.scaled.begin(), rep.scaled.end());
  rep.median_scaled = median(rep.scaled);
  return rep;
}

/// Jump times of the mark chain: holds Exp(v(s)), then moves to s' with
/// probability Theta(s, s') nu(s').
inline std::vector<double> simulate_mark_chain(const Eigen::VectorXd& v, const Eigen::MatrixXd& theta,
                                               const Eigen::VectorXd& nu, int s0, double T, Rng& rng) {
  std::vector<detail::Cumulative> laws(static_cast<std::size_t>(v.size()));
  for (Eigen::Index s = 0; s < v.size(); ++s) {
    for (Eigen::Index t = 0; t < v.size(); ++t) laws[static_cast<std::size_t>(s)].push(theta(s, t) * nu(t));
  }
  std::vector<double> times;
  double t = 0;
  int s = s0;
  while (true) {
    t += exponential(rng, v(s));
    if (t >= T) return times;
    times.push_back(t);
    s = static_cast<int>(laws[static_cast<std::size_t>(s)].sample(rng));
  }
}

struct DominationCell {
  int start_mark;
  double t;
  long k;
  double estimate;
  double se;
  double exact;  ///< P_{lambda0}(n(t) <= k)
  bool passed;
};

struct DominationReport {
  double lambda0 = 0;
  std::vector<DominationCell> cells;
  bool passed() const {
    return std::all_of(cells.begin(), cells.end(), [](const DominationCell& c) { return c.passed; });
  }
};

struct DominationControls {
  std::vector<double> times;
  std::vector<long> ks;
  std::size_t replicas = 100000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::optional<double> lambda0;  ///< defaults to min v
};

/// P_{v(.)}(n(t) <= k) by simulation of the mark chain against the exact
/// Poisson(lambda0 t) CDF, for every start mark. The standard error uses the
/// larger of the observed and the null Bernoulli variance, so cells where the
/// simulation saw no exceedance are still tested at the right scale.
inline DominationReport poisson_domination_check(const Eigen::VectorXd& v, const Eigen::MatrixXd& theta,
                                                 const Eigen::VectorXd& nu, const DominationControls& c) {
  const double lambda0 = c.lambda0.value_or(v.minCoeff());
  if (!(lambda0 > 0) || lambda0 > v.minCoeff() * (1 + 1e-12)) throw ModelError("lambda0 must be in (0, min v]");
  if (c.times.empty() || c.ks.empty()) throw ModelError("domination check needs a (t, k) grid");
  const double T = *std::max_element(c.times.begin(), c.times.end());
  const std::size_t G = c.times.size() * c.ks.size();
  DominationReport rep;
  rep.lambda0 = lambda0;
  for (Eigen::Index s0 = 0; s0 < v.size(); ++s0) {
    struct Acc {
      std::vector<std::size_t> hits;
      std::size_t n = 0;
      void merge(const Acc& o) {
        for (std::size_t i = 0; i < hits.size(); ++i) hits[i] += o.hits[i];
        n += o.n;
      }
    };
    Acc proto;
    proto.hits.assign(G, 0);
    auto acc = run_replicas(c.replicas, c.workers, proto, [&](std::size_t r, Acc& a) {
      Rng rng = make_stream(c.seed, r, stream_tag::poisson * 1000003ULL + static_cast<std::uint64_t>(s0));
      const auto jumps = simulate_mark_chain(v, theta, nu, static_cast<int>(s0), T, rng);
      for (std::size_t i = 0; i < c.times.size(); ++i) {
        const auto n = static_cast<long>(std::lower_bound(jumps.begin(), jumps.end(), c.times[i]) - jumps.begin());
        for (std::size_t k = 0; k < c.ks.size(); ++k) {
          if (n <= c.ks[k]) ++a.hits[i * c.ks.size() + k];
        }
      }
      ++a.n;
    });
    const double n = static_cast<double>(acc.n);
    for (std::size_t i = 0; i < c.times.size(); ++i) {
      for (std::size_t k = 0; k < c.ks.size(); ++k) {
        DominationCell cell;
        cell.start_mark = static_cast<int>(s0);
        cell.t = c.times[i];
        cell.k = c.ks[k];
        cell.estimate = static_cast<double>(acc.hits[i * c.ks.size() + k]) / n;
        cell.exact = poisson_cdf(cell.k, lambda0 * cell.t);
        const double var = std::max(cell.estimate * (1 - cell.estimate), cell.exact * (1 - cell.exact));
        cell.se = std::sqrt(var / n);
        cell.passed = cell.estimate <= cell.exact + 3 * cell.se;
        rep.cells.push_back(cell);
      }
    }
  }
  return rep;
}

inline constexpr double kLowerTailB = 0.15342640972002736;  // (1 - ln 2) / 2

struct LowerTailPoint {
  double t;
  bool excluded;  ///< t < 2 / lambda0
  double lhs;     ///< P_{lambda0}(n(t) <= floor(lambda0 t / 2))
  double rhs;     ///< M~ t e^{-B lambda0 t}, M~ = M lambda0 / 2
  double ratio;
};

struct LowerTailReport {
  double lambda0 = 0;
  double M = 1;
  std::vector<LowerTailPoint> points;
  double max_ratio = 0;
  bool passed() const noexcept { return max_ratio <= 1.0; }
};

inline LowerTailReport lower_tail_bound_check(double lambda0, const std::vector<double>& times, double M = 1.0) {
  if (!(lambda0 > 0)) throw ModelError("lambda0 must be positive");
  LowerTailReport rep;
  rep.lambda0 = lambda0;
  rep.M = M;
  for (double t : times) {
    LowerTailPoint p{t, t < 2.0 / lambda0, 0, 0, 0};
    p.lhs = poisson_cdf(static_cast<long>(std::floor(lambda0 * t / 2)), lambda0 * t);
    p.rhs = 0.5 * M * lambda0 * t * std::exp(-kLowerTailB * lambda0 * t);
    p.ratio = p.lhs / p.rhs;
    if (!p.excluded) rep.max_ratio = std::max(rep.max_ratio, p.ratio);
    rep.points.push_back(p);
  }
  return rep;
}

}  // namespace contactlab::walkers
