#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/criticality.hpp"
#include "contactlab/errors.hpp"
#include "contactlab/parallel.hpp"
#include "contactlab/random.hpp"
#include "contactlab/stats.hpp"
#include "contactlab/tensor.hpp"

namespace contactlab::simulator {

using criticality::TransformedModel;
using hierarchy::CorrelationTensor;

/// Particle counts per point.
using Configuration = std::vector<long>;

enum class EventKind { birth, death, jump };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::birth: return "birth";
    case EventKind::death: return "death";
    case EventKind::jump: return "jump";
  }
  return "?";
}

struct Event {
  double time;
  EventKind kind;
  std::size_t from;  ///< parent, dying or jumping particle
  std::size_t to;    ///< child or destination; equals `from` for deaths
};

struct EventLog {
  std::vector<Event> events;  ///< filled when recording is requested
  std::vector<double> snapshot_times;
  std::vector<Configuration> snapshots;
  std::size_t event_count = 0;
  std::size_t deaths = 0;
  double particle_time = 0;  ///< integral of |gamma_t| dt
  bool truncated = false;
};

struct SimulationOptions {
  std::size_t event_cap = 1000000;
  bool record_events = false;
};

namespace detail {

struct Cumulative {
  std::vector<double> cdf;
  double total() const noexcept { return cdf.empty() ? 0.0 : cdf.back(); }
  std::size_t sample(double u) const {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u * total());
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
  }
};

}  // namespace detail

/// Per-particle rates and offspring/destination laws of the contact process
/// written with (b, mbar): a particle at x dies at rate V(x), places a child
/// at y at rate b(y,x) mbar(y) and, with a jump kernel, moves to y at rate
/// b_J(y,x) mbar(y).
class ContactRates {
 public:
  explicit ContactRates(const TransformedModel& tm) : n_(tm.size()) {
    const Eigen::MatrixXd& b = tm.dense_b();
    const Eigen::MatrixXd& jb = tm.dense_jump_b();
    death_.resize(n_);
    birth_.resize(n_);
    jump_.resize(n_);
    child_.resize(n_);
    dest_.resize(n_);
    for (std::size_t x = 0; x < n_; ++x) {
      death_[x] = tm.death(x);
      double cb = 0, cj = 0;
      for (std::size_t y = 0; y < n_; ++y) {
        cb += b(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) * tm.mbar(y);
        child_[x].cdf.push_back(cb);
        if (jb.size()) {
          cj += jb(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) * tm.mbar(y);
          dest_[x].cdf.push_back(cj);
        }
      }
      birth_[x] = cb;
      jump_[x] = cj;
    }
  }

  std::size_t size() const noexcept { return n_; }
  double death(std::size_t x) const { return death_[x]; }
  double birth(std::size_t x) const { return birth_[x]; }
  double jump(std::size_t x) const { return jump_[x]; }
  double total(std::size_t x) const { return death_[x] + birth_[x] + jump_[x]; }
  std::size_t child(std::size_t x, double u) const { return child_[x].sample(u); }
  std::size_t destination(std::size_t x, double u) const { return dest_[x].sample(u); }

 private:
  std::size_t n_;
  std::vector<double> death_, birth_, jump_;
  std::vector<detail::Cumulative> child_, dest_;
};

/// Exact event-driven simulation up to T with snapshots at `snapshot_times`
/// (sorted, within [0, T]). Stops early and flags truncation after
/// `event_cap` events.
inline EventLog simulate_contact(const ContactRates& rates, Configuration gamma, double T,
                                 const std::vector<double>& snapshot_times, Rng& rng,
                                 const SimulationOptions& opt = {}) {
  if (gamma.size() != rates.size()) throw ModelError("configuration does not match the space");
  if (std::any_of(gamma.begin(), gamma.end(), [](long c) { return c < 0; })) {
    throw ModelError("multiplicities must be non-negative");
  }
  if (!std::is_sorted(snapshot_times.begin(), snapshot_times.end())) throw ModelError("snapshot times must be sorted");
  EventLog log;
  log.snapshot_times = snapshot_times;
  const std::size_t N = rates.size();
  double total = 0;
  long particles = 0;
  for (std::size_t x = 0; x < N; ++x) {
    total += static_cast<double>(gamma[x]) * rates.total(x);
    particles += gamma[x];
  }
  double t = 0;
  std::size_t snap = 0;
  auto take_snapshots = [&](double until) {
    while (snap < snapshot_times.size() && snapshot_times[snap] <= until) {
      log.snapshots.push_back(gamma);
      ++snap;
    }
  };
  while (true) {
    const double next = total > 0 ? t + exponential(rng, total) : std::numeric_limits<double>::infinity();
    if (next > T) {
      log.particle_time += static_cast<double>(particles) * (T - t);
      take_snapshots(T);
      break;
    }
    // state is constant on [t, next)
    while (snap < snapshot_times.size() && snapshot_times[snap] < next) {
      log.snapshots.push_back(gamma);
      ++snap;
    }
    log.particle_time += static_cast<double>(particles) * (next - t);
    t = next;
    if (log.event_count >= opt.event_cap) {
      log.truncated = true;
      break;
    }
    // pick the particle's point proportional to mult(x) * total rate at x
    double u = uniform01(rng) * total;
    std::size_t x = 0;
    for (; x + 1 < N; ++x) {
      const double w = static_cast<double>(gamma[x]) * rates.total(x);
      if (u < w) break;
      u -= w;
    }
    while (gamma[x] == 0 && x > 0) --x;  // guard against rounding at the end of the scan
    const double r = uniform01(rng) * rates.total(x);
    Event ev{t, EventKind::death, x, x};
    if (r < rates.death(x)) {
      --gamma[x];
      --particles;
      ++log.deaths;
    } else if (r < rates.death(x) + rates.birth(x)) {
      const std::size_t y = rates.child(x, uniform01(rng));
      ev.kind = EventKind::birth;
      ev.to = y;
      ++gamma[y];
      ++particles;
    } else {
      const std::size_t y = rates.destination(x, uniform01(rng));
      ev.kind = EventKind::jump;
      ev.to = y;
      --gamma[x];
      ++gamma[y];
    }
    total = 0;  // recomputed exactly so rounding never accumulates
    for (std::size_t z = 0; z < N; ++z) total += static_cast<double>(gamma[z]) * rates.total(z);
    ++log.event_count;
    if (opt.record_events) log.events.push_back(ev);
  }
  return log;
}

/// Independent Poisson(rho * mbar(x)) counts per point.
inline Configuration poisson_configuration(const TransformedModel& tm, double rho, Rng& rng) {
  Configuration g(tm.size());
  for (std::size_t x = 0; x < tm.size(); ++x) {
    std::poisson_distribution<long> P(rho * tm.mbar(x));
    g[x] = P(rng);
  }
  return g;
}

/// prod over distinct points z of the falling factorial (gamma(z))_{c_z},
/// c_z the number of times z appears in the tuple.
inline double factorial_moment_product(const Configuration& g, const std::vector<std::size_t>& tuple) {
  double p = 1;
  std::vector<std::size_t> sorted = tuple;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const long n = g[sorted[i]];
    for (std::size_t k = 0; k < j - i; ++k) p *= static_cast<double>(n - static_cast<long>(k));
    if (p == 0) return 0;
    i = j;
  }
  return p;
}

/// Streaming estimator of k^(n) from configurations.
class MomentAccumulator {
 public:
  MomentAccumulator() = default;
  MomentAccumulator(int order, std::size_t extent) : order_(order), extent_(extent) {
    if (order < 1) throw ModelError("moment order must be at least 1");
    stats_.resize(CorrelationTensor(order, extent).size());
  }

  void add(const Configuration& g) {
    CorrelationTensor shape(order_, extent_);
    for (std::size_t f = 0; f < stats_.size(); ++f) stats_[f].add(factorial_moment_product(g, shape.unflatten(f)));
  }

  void merge(const MomentAccumulator& o) {
    for (std::size_t i = 0; i < stats_.size(); ++i) stats_[i].merge(o.stats_[i]);
  }

  std::size_t count() const noexcept { return stats_.empty() ? 0 : stats_.front().count(); }
  int order() const noexcept { return order_; }
  std::size_t extent() const noexcept { return extent_; }
  const std::vector<RunningStat>& stats() const noexcept { return stats_; }

 private:
  int order_ = 1;
  std::size_t extent_ = 0;
  std::vector<RunningStat> stats_;
};

struct MomentEstimate {
  int order = 0;
  CorrelationTensor values;
  CorrelationTensor stderrs;
  std::size_t replicas = 0;
};

inline constexpr std::size_t kMinReplicas = 100;

/// k^(n)(x_1..x_n) = E[prod falling factorials] / prod mbar(x_i).
inline MomentEstimate finish_moments(const MomentAccumulator& acc, const Eigen::VectorXd& mbar) {
  if (acc.count() < kMinReplicas) {
    throw ModelError("empirical correlations need at least " + std::to_string(kMinReplicas) + " replicas");
  }
  MomentEstimate est;
  est.order = acc.order();
  est.replicas = acc.count();
  est.values = CorrelationTensor(acc.order(), acc.extent());
  est.stderrs = CorrelationTensor(acc.order(), acc.extent());
  for (std::size_t f = 0; f < est.values.size(); ++f) {
    double scale = 1;
    for (auto i : est.values.unflatten(f)) scale *= mbar(static_cast<Eigen::Index>(i));
    est.values[f] = acc.stats()[f].mean() / scale;
    est.stderrs[f] = acc.stats()[f].stderr_of_mean() / scale;
  }
  return est;
}

/// Empirical k^(n) at snapshot index `snapshot` over a set of logs;
/// truncated logs are skipped.
inline MomentEstimate empirical_correlations(const std::vector<EventLog>& logs, const Eigen::VectorXd& mbar,
                                             std::size_t snapshot, int n) {
  MomentAccumulator acc(n, static_cast<std::size_t>(mbar.size()));
  for (const auto& log : logs) {
    if (log.truncated) continue;
    if (snapshot >= log.snapshots.size()) throw ModelError("requested snapshot is missing from a log");
    acc.add(log.snapshots[snapshot]);
  }
  return finish_moments(acc, mbar);
}

struct ReplicaControls {
  double T = 1;
  std::vector<double> snapshot_times;
  std::size_t replicas = 1000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  int max_order = 2;
  SimulationOptions options;
};

struct ReplicaSummary {
  std::vector<double> snapshot_times;
  std::vector<std::vector<MomentEstimate>> moments;  ///< [snapshot][n-1]
  std::vector<double> mean_particles;                ///< E |gamma_t|
  std::vector<double> mean_particles_se;
  std::size_t replicas = 0;
  std::size_t truncated = 0;
  std::size_t deaths = 0;
  double particle_time = 0;
};

/// Runs `replicas` simulations from Poisson(rho mbar) starts and collects
/// factorial moments up to `max_order` at every snapshot.
inline ReplicaSummary simulate_replicas(const TransformedModel& tm, double rho, const ReplicaControls& c) {
  if (c.max_order < 1) throw ModelError("max_order must be at least 1");
  const ContactRates rates(tm);
  const std::size_t S = c.snapshot_times.size();
  struct Acc {
    std::vector<MomentAccumulator> m;  ///< [snapshot * max_order + n-1]
    std::vector<RunningStat> size;
    std::size_t truncated = 0, deaths = 0, count = 0;
    double particle_time = 0;
    void merge(const Acc& o) {
      for (std::size_t i = 0; i < m.size(); ++i) m[i].merge(o.m[i]);
      for (std::size_t i = 0; i < size.size(); ++i) size[i].merge(o.size[i]);
      truncated += o.truncated;
      deaths += o.deaths;
      count += o.count;
      particle_time += o.particle_time;
    }
  };
  Acc proto;
  for (std::size_t s = 0; s < S; ++s) {
    for (int n = 1; n <= c.max_order; ++n) proto.m.emplace_back(n, tm.size());
  }
  proto.size.resize(S);
  auto acc = run_replicas(c.replicas, c.workers, proto, [&](std::size_t r, Acc& a) {
    Rng rng = make_stream(c.seed, r, stream_tag::simulator);
    auto g0 = poisson_configuration(tm, rho, rng);
    const auto log = simulate_contact(rates, std::move(g0), c.T, c.snapshot_times, rng, c.options);
    ++a.count;
    if (log.truncated) {
      ++a.truncated;
      return;
    }
    a.deaths += log.deaths;
    a.particle_time += log.particle_time;
    for (std::size_t s = 0; s < S; ++s) {
      long total = 0;
      for (long v : log.snapshots[s]) total += v;
      a.size[s].add(static_cast<double>(total));
      for (int n = 1; n <= c.max_order; ++n) {
        a.m[s * static_cast<std::size_t>(c.max_order) + static_cast<std::size_t>(n - 1)].add(log.snapshots[s]);
      }
    }
  });
  ReplicaSummary out;
  out.snapshot_times = c.snapshot_times;
  out.replicas = acc.count;
  out.truncated = acc.truncated;
  out.deaths = acc.deaths;
  out.particle_time = acc.particle_time;
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<MomentEstimate> row;
    for (int n = 1; n <= c.max_order; ++n) {
      row.push_back(finish_moments(acc.m[s * static_cast<std::size_t>(c.max_order) + static_cast<std::size_t>(n - 1)],
                                   tm.mbar_vector()));
    }
    out.moments.push_back(std::move(row));
    out.mean_particles.push_back(acc.size[s].mean());
    out.mean_particles_se.push_back(acc.size[s].stderr_of_mean());
  }
  return out;
}

}  // namespace contactlab::simulator
