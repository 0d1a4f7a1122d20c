#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace contactlab {

/// Malformed space/model description or violated standing assumption.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative method did not reach its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A time integral that should converge keeps growing (recurrent model).
/// Carries the growth diagnostics that led to the verdict.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, nlohmann::json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}

  const nlohmann::json& diagnostics() const noexcept { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

/// Time stepping could not meet the requested accuracy.
class AccuracyError : public std::runtime_error {
 public:
  AccuracyError(const std::string& what, double achieved)
      : std::runtime_error(what), achieved_(achieved) {}

  double achieved() const noexcept { return achieved_; }

 private:
  double achieved_;
};

}  // namespace contactlab
