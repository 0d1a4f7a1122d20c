#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "contactlab/errors.hpp"
#include "contactlab/rate_model.hpp"
#include "contactlab/state_space.hpp"

namespace contactlab::model {

using nlohmann::json;

/// Parsed model configuration.
struct ModelConfig {
  StateSpace space;
  RateModel model;
};

namespace detail {

inline const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ModelError(std::string("missing key '") + key + "'");
  return j.at(key);
}

inline double finite_number(const json& j, const char* what) {
  if (!j.is_number()) throw ModelError(std::string(what) + " must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ModelError(std::string(what) + " must be finite");
  return v;
}

inline std::vector<double> number_array(const json& j, const char* what) {
  if (!j.is_array()) throw ModelError(std::string(what) + " must be an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) out.push_back(finite_number(v, what));
  return out;
}

/// Square matrix from nested rows or a flat row-major array.
inline Eigen::MatrixXd square_matrix(const json& j, std::size_t n, const char* what) {
  if (!j.is_array()) throw ModelError(std::string(what) + " must be an array");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  if (!j.empty() && j.front().is_array()) {
    if (j.size() != n) throw ModelError(std::string(what) + " has the wrong number of rows");
    for (std::size_t r = 0; r < n; ++r) {
      auto row = number_array(j[r], what);
      if (row.size() != n) throw ModelError(std::string(what) + " row has the wrong length");
      for (std::size_t c = 0; c < n; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
    }
  } else {
    auto flat = number_array(j, what);
    if (flat.size() != n * n) throw ModelError(std::string(what) + " must hold n*n row-major entries");
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = flat[r * n + c];
      }
    }
  }
  if (m.size() && m.minCoeff() < 0.0) throw ModelError(std::string(what) + " entries must be non-negative");
  return m;
}

inline Boundary parse_boundary(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "periodic") return Boundary::periodic;
  if (s == "unbounded") return Boundary::unbounded;
  throw ModelError("unknown boundary mode '" + s + "'");
}

inline Stencil parse_stencil(const json& j, int dim) {
  if (j.is_string()) {
    if (j.get<std::string>() == "nearest-neighbor") return Stencil::nearest_neighbor(dim);
    throw ModelError("unknown stencil preset '" + j.get<std::string>() + "'");
  }
  if (j.is_object() && j.contains("preset")) {
    const double total = j.contains("mass") ? finite_number(j.at("mass"), "stencil mass") : 1.0;
    if (j.at("preset").get<std::string>() != "nearest-neighbor") throw ModelError("unknown stencil preset");
    return Stencil::nearest_neighbor(dim, total);
  }
  if (!j.is_array()) throw ModelError("stencil must be a preset name or an array of {offset, value}");
  Stencil s(dim);
  for (const auto& e : j) {
    auto offset = require(e, "offset").get<std::vector<int>>();
    s.set(std::move(offset), finite_number(require(e, "value"), "stencil value"));
  }
  return s;
}

inline Kernel parse_kernel(const json& j, const StateSpace& space) {
  const auto form = require(j, "form").get<std::string>();
  if (form == "dense") {
    return DenseKernel{square_matrix(require(j, "matrix"), space.size(), "dense kernel")};
  }
  if (!space.is_lattice()) throw ModelError("form '" + form + "' requires a lattice space");
  if (form == "stencil") {
    return StencilKernel{parse_stencil(require(j, "alpha"), space.dim())};
  }
  if (form == "factorized") {
    return FactorizedKernel{parse_stencil(require(j, "alpha"), space.dim()),
                            square_matrix(require(j, "Q"), space.mark_count(), "Q")};
  }
  throw ModelError("unknown kernel form '" + form + "'");
}

}  // namespace detail

inline StateSpace parse_space(const json& j) {
  using namespace detail;
  const auto type = require(j, "type").get<std::string>();
  if (type == "finite") {
    auto weights = number_array(require(j, "weights"), "weights");
    std::vector<std::string> ids;
    if (j.contains("ids")) ids = j.at("ids").get<std::vector<std::string>>();
    return StateSpace::finite(std::move(weights), std::move(ids));
  }
  LatticeWindow w;
  w.dim = require(j, "d").get<int>();
  w.radius = require(j, "R").get<int>();
  w.boundary = j.contains("boundary") ? parse_boundary(j.at("boundary")) : Boundary::periodic;
  if (type == "lattice") return StateSpace::lattice(w.dim, w.radius, w.boundary);
  if (type == "product") {
    auto marks = require(j, "marks").get<std::vector<std::string>>();
    auto nu = number_array(require(j, "nu"), "nu");
    return StateSpace::product(w, std::move(marks), std::move(nu));
  }
  throw ModelError("unknown space type '" + type + "'");
}

/// Death rates: a scalar, a per-point array, or {"per_mark": [...]}.
inline Eigen::VectorXd parse_death(const json& j, const StateSpace& space) {
  using namespace detail;
  const auto n = static_cast<Eigen::Index>(space.size());
  if (j.is_number()) return Eigen::VectorXd::Constant(n, finite_number(j, "death rate"));
  if (j.is_array()) {
    auto v = number_array(j, "death rates");
    if (v.size() != space.size()) throw ModelError("per-point death array does not match the space size");
    return Eigen::Map<Eigen::VectorXd>(v.data(), n);
  }
  if (j.is_object() && j.contains("per_mark")) {
    auto v = number_array(j.at("per_mark"), "per-mark death rates");
    if (v.size() != space.mark_count()) throw ModelError("per-mark death array does not match the mark count");
    Eigen::VectorXd out(n);
    for (std::size_t i = 0; i < space.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[space.mark_of(i)];
    return out;
  }
  throw ModelError("death must be a number, an array, or {\"per_mark\": [...]}");
}

inline ModelConfig parse_model(const json& j) try {
  using namespace detail;
  StateSpace space = parse_space(require(j, "space"));
  RateModel model{parse_kernel(require(j, "birth"), space), parse_death(require(j, "death"), space), std::nullopt};
  if (j.contains("jump") && !j.at("jump").is_null()) model.jump = parse_kernel(j.at("jump"), space);
  check_consistency(model, space);
  return {std::move(space), std::move(model)};
} catch (const json::exception& e) {
  throw ModelError(std::string("malformed model description: ") + e.what());
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ModelError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline ModelConfig load_model(const std::string& path) { return parse_model(read_json_file(path)); }

}  // namespace contactlab::model
