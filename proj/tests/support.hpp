#pragma once

#include <random>
#include <vector>

#include <Eigen/Dense>

#include "contactlab/criticality.hpp"
#include "contactlab/rate_model.hpp"
#include "contactlab/state_space.hpp"

namespace testing_support {

using namespace contactlab;
using model::Boundary;
using model::RateModel;
using model::StateSpace;
using model::Stencil;

inline RateModel dense_model(const Eigen::MatrixXd& A, const Eigen::VectorXd& V) {
  return RateModel{model::DenseKernel{A}, V, std::nullopt};
}

/// Random strictly positive kernel and death rates on n points.
inline std::pair<StateSpace, RateModel> random_finite(std::size_t n, std::mt19937_64& g) {
  std::uniform_real_distribution<double> U(0.1, 2.0);
  std::vector<double> w(n);
  for (auto& x : w) x = U(g);
  Eigen::MatrixXd A(n, n);
  Eigen::VectorXd V(n);
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    V(i) = U(g);
    for (Eigen::Index j = 0; j < A.cols(); ++j) A(i, j) = U(g);
  }
  return {StateSpace::finite(w), dense_model(A, V)};
}

inline criticality::TransformedModel random_critical(std::size_t n, std::mt19937_64& g) {
  auto [space, m] = random_finite(n, g);
  return criticality::calibrate(m, space);
}

inline std::pair<StateSpace, RateModel> nn_lattice(int d, int R, Boundary b, double mass = 1.0, double V = 1.0) {
  StateSpace s = StateSpace::lattice(d, R, b);
  RateModel m{model::StencilKernel{Stencil::nearest_neighbor(d, mass)},
              Eigen::VectorXd::Constant(static_cast<Eigen::Index>(s.size()), V), std::nullopt};
  return {std::move(s), std::move(m)};
}

/// alpha nearest neighbour, marks with Q, per-mark death v, weights nu.
inline std::pair<StateSpace, RateModel> marked_lattice(int d, int R, Boundary b, const Eigen::MatrixXd& Q,
                                                       const std::vector<double>& v, const std::vector<double>& nu) {
  std::vector<std::string> names;
  for (std::size_t s = 0; s < nu.size(); ++s) names.push_back("m" + std::to_string(s));
  StateSpace space = StateSpace::product({d, R, b}, names, nu);
  Eigen::VectorXd V(static_cast<Eigen::Index>(space.size()));
  for (std::size_t i = 0; i < space.size(); ++i) V(static_cast<Eigen::Index>(i)) = v[space.mark_of(i)];
  RateModel m{model::FactorizedKernel{Stencil::nearest_neighbor(d), Q}, V, std::nullopt};
  return {std::move(space), std::move(m)};
}

}  // namespace testing_support
