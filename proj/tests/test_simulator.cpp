#include <gtest/gtest.h>

#include "contactlab/hierarchy.hpp"
#include "contactlab/simulator.hpp"
#include "support.hpp"

using namespace contactlab;
using namespace testing_support;
using simulator::Configuration;
using simulator::ContactRates;
using simulator::EventKind;

namespace {

criticality::TransformedModel one_point(double a, double V) {
  criticality::GroundState gs;
  gs.psi = Eigen::VectorXd::Ones(1);
  return criticality::ground_transform(dense_model(Eigen::MatrixXd::Constant(1, 1, a), Eigen::VectorXd::Constant(1, V)),
                                       StateSpace::finite({1.0}), gs);
}

}  // namespace

TEST(Simulator, SingleDeathEvent) {
  const auto tm = one_point(0.0, 2.0);
  const ContactRates rates(tm);
  simulator::SimulationOptions opt;
  opt.record_events = true;
  RunningStat life;
  for (std::uint64_t r = 0; r < 20000; ++r) {
    Rng rng = make_stream(1, r);
    const auto log = simulator::simulate_contact(rates, {1}, 1e6, {}, rng, opt);
    ASSERT_EQ(log.events.size(), 1u);
    EXPECT_EQ(log.events[0].kind, EventKind::death);
    EXPECT_EQ(log.events[0].from, log.events[0].to);
    EXPECT_EQ(log.deaths, 1u);
    EXPECT_DOUBLE_EQ(log.particle_time, log.events[0].time);
    life.add(log.events[0].time);
  }
  EXPECT_NEAR(life.mean(), 0.5, 4 * life.stderr_of_mean());
}

TEST(Simulator, PureDeathExtinctionTime) {
  // three independent unit-rate deaths: E max = 1 + 1/2 + 1/3
  const auto tm = one_point(0.0, 1.0);
  const ContactRates rates(tm);
  simulator::SimulationOptions opt;
  opt.record_events = true;
  RunningStat ext;
  for (std::uint64_t r = 0; r < 20000; ++r) {
    Rng rng = make_stream(2, r);
    const auto log = simulator::simulate_contact(rates, {3}, 1e6, {}, rng, opt);
    ASSERT_EQ(log.deaths, 3u);
    ext.add(log.events.back().time);
  }
  EXPECT_NEAR(ext.mean(), 1 + 0.5 + 1.0 / 3, 4 * ext.stderr_of_mean());
}

TEST(Simulator, CriticalOnePointIsAMartingale) {
  const auto tm = one_point(1.0, 1.0);
  const ContactRates rates(tm);
  RunningStat size;
  for (std::uint64_t r = 0; r < 20000; ++r) {
    Rng rng = make_stream(3, r);
    const auto log = simulator::simulate_contact(rates, {5}, 2.0, {2.0}, rng);
    ASSERT_FALSE(log.truncated);
    size.add(static_cast<double>(log.snapshots[0][0]));
  }
  EXPECT_NEAR(size.mean(), 5.0, 4 * size.stderr_of_mean());
}

TEST(Simulator, EventLogIsOrderedAndCounted) {
  std::mt19937_64 g(4);
  const auto tm = random_critical(4, g);
  const ContactRates rates(tm);
  simulator::SimulationOptions opt;
  opt.record_events = true;
  Rng rng = make_stream(4, 0);
  const auto log = simulator::simulate_contact(rates, {3, 3, 3, 3}, 3.0, {0.0, 1.0, 3.0}, rng, opt);
  EXPECT_EQ(log.events.size(), log.event_count);
  EXPECT_EQ(log.snapshots.size(), 3u);
  EXPECT_EQ(log.snapshots[0], Configuration({3, 3, 3, 3}));
  long size = 12;
  for (std::size_t i = 0; i < log.events.size(); ++i) {
    if (i) EXPECT_LE(log.events[i - 1].time, log.events[i].time);
    if (log.events[i].kind == EventKind::birth) ++size;
    if (log.events[i].kind == EventKind::death) --size;
  }
  long final_size = 0;
  for (long c : log.snapshots[2]) final_size += c;
  EXPECT_EQ(size, final_size);
}

TEST(Simulator, EventCapTruncates) {
  const auto tm = one_point(1.0, 1.0);
  simulator::SimulationOptions opt;
  opt.event_cap = 5;
  Rng rng = make_stream(5, 0);
  const auto log = simulator::simulate_contact(ContactRates(tm), {100}, 100.0, {}, rng, opt);
  EXPECT_TRUE(log.truncated);
  EXPECT_EQ(log.event_count, 5u);
}

TEST(Simulator, RejectsBadInput) {
  const auto tm = one_point(1.0, 1.0);
  Rng rng(6);
  EXPECT_THROW(simulator::simulate_contact(ContactRates(tm), {1, 1}, 1.0, {}, rng), ModelError);
  EXPECT_THROW(simulator::simulate_contact(ContactRates(tm), {-1}, 1.0, {}, rng), ModelError);
  EXPECT_THROW(simulator::simulate_contact(ContactRates(tm), {1}, 1.0, {0.5, 0.1}, rng), ModelError);
}

TEST(Moments, FallingFactorials) {
  const Configuration g = {4, 2, 0};
  EXPECT_EQ(simulator::factorial_moment_product(g, {0}), 4.0);
  EXPECT_EQ(simulator::factorial_moment_product(g, {0, 0}), 12.0);
  EXPECT_EQ(simulator::factorial_moment_product(g, {0, 1, 0}), 24.0);
  EXPECT_EQ(simulator::factorial_moment_product(g, {1, 1, 1}), 0.0);
  EXPECT_EQ(simulator::factorial_moment_product(g, {2}), 0.0);
}

TEST(Moments, DeterministicSingleParticle) {
  std::mt19937_64 g(7);
  const auto tm = random_critical(3, g);
  simulator::MomentAccumulator k1(1, 3), k2(2, 3);
  for (int i = 0; i < 100; ++i) {
    k1.add({0, 1, 0});
    k2.add({0, 1, 0});
  }
  const auto e1 = simulator::finish_moments(k1, tm.mbar_vector());
  EXPECT_DOUBLE_EQ(e1.values[1], 1 / tm.mbar(1));
  EXPECT_EQ(e1.values[0], 0.0);
  EXPECT_EQ(e1.stderrs[1], 0.0);
  EXPECT_EQ(simulator::finish_moments(k2, tm.mbar_vector()).values.sup_norm(), 0.0);
}

TEST(Moments, TooFewReplicasRejected) {
  simulator::MomentAccumulator acc(1, 2);
  for (int i = 0; i < 99; ++i) acc.add({1, 1});
  EXPECT_THROW(simulator::finish_moments(acc, Eigen::Vector2d(1, 1)), ModelError);
  acc.add({1, 1});
  EXPECT_NO_THROW(simulator::finish_moments(acc, Eigen::Vector2d(1, 1)));
}

TEST(Moments, PoissonStartHasProductCorrelations) {
  std::mt19937_64 g(8);
  const auto tm = random_critical(3, g);
  simulator::ReplicaControls c;
  c.T = 0.0;
  c.snapshot_times = {0.0};
  c.replicas = 20000;
  c.seed = 8;
  c.max_order = 3;
  const double rho = 1.3;
  const auto sum = simulator::simulate_replicas(tm, rho, c);
  for (int n = 1; n <= 3; ++n) {
    const auto& est = sum.moments[0][static_cast<std::size_t>(n - 1)];
    for (std::size_t f = 0; f < est.values.size(); ++f) {
      EXPECT_NEAR(est.values[f], std::pow(rho, n), 4 * est.stderrs[f]) << "n=" << n << " f=" << f;
    }
  }
}

TEST(Moments, CriticalModelMatchesHierarchy) {
  std::mt19937_64 g(9);
  const auto tm = random_critical(3, g);
  const double rho = 1.0;
  simulator::ReplicaControls c;
  c.T = 1.0;
  c.snapshot_times = {0.5, 1.0};
  c.replicas = 20000;
  c.seed = 9;
  c.max_order = 2;
  const auto sum = simulator::simulate_replicas(tm, rho, c);
  const auto traj = hierarchy::evolve_hierarchy(
      tm, {hierarchy::poisson_initial(1, rho, 3), hierarchy::poisson_initial(2, rho, 3)}, c.snapshot_times);
  EXPECT_EQ(sum.truncated, 0u);
  for (std::size_t s = 0; s < 2; ++s) {
    for (int n = 1; n <= 2; ++n) {
      const auto& est = sum.moments[s][static_cast<std::size_t>(n - 1)];
      const auto& exact = traj.levels[s][static_cast<std::size_t>(n - 1)];
      for (std::size_t f = 0; f < est.values.size(); ++f) {
        EXPECT_NEAR(est.values[f], exact[f], 4 * est.stderrs[f]) << "t=" << c.snapshot_times[s] << " n=" << n;
      }
    }
  }
}

TEST(Moments, DeathRateAudit) {
  std::mt19937_64 g(10);
  auto [space, m] = random_finite(3, g);
  m.death = Eigen::VectorXd::Constant(3, 1.7);
  const auto tm = criticality::calibrate(m, space);
  simulator::ReplicaControls c;
  c.T = 2.0;
  c.snapshot_times = {2.0};
  c.replicas = 5000;
  c.seed = 10;
  c.max_order = 1;
  const auto sum = simulator::simulate_replicas(tm, 1.0, c);
  // deaths are Poisson given the particle time
  const double expect = 1.7 * sum.particle_time;
  EXPECT_NEAR(static_cast<double>(sum.deaths), expect, 4 * std::sqrt(expect));
}

TEST(Moments, JumpKernelKeepsFirstCorrelationFlat) {
  std::mt19937_64 g(11);
  auto [space, m] = random_finite(3, g);
  Eigen::MatrixXd J(3, 3);
  std::uniform_real_distribution<double> U(0.2, 1.0);
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) J(i, j) = i == j ? 0.0 : U(g);
  }
  m.jump = model::DenseKernel{J};
  const auto tm = criticality::calibrate(m, space);
  simulator::ReplicaControls c;
  c.T = 2.0;
  c.snapshot_times = {1.0, 2.0};
  c.replicas = 20000;
  c.seed = 11;
  c.max_order = 1;
  const double rho = 0.8;
  const auto sum = simulator::simulate_replicas(tm, rho, c);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& est = sum.moments[s][0];
    for (std::size_t x = 0; x < 3; ++x) EXPECT_NEAR(est.values[x], rho, 4 * est.stderrs[x]) << "t=" << s << " x=" << x;
  }
}
