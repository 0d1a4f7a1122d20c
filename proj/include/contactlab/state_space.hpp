#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "contactlab/errors.hpp"

namespace contactlab::model {

enum class SpaceKind { finite, lattice, product };

/// `periodic` wraps displacements into the window; `unbounded` treats the
/// window as a finite view of the full integer lattice (walkers roam freely).
enum class Boundary { periodic, unbounded };

inline constexpr int kMaxDim = 4;

struct LatticeWindow {
  int dim = 1;
  int radius = 0;
  Boundary boundary = Boundary::periodic;
};

/// Enumerated points with positive measure weights.
///
/// Lattice windows enumerate [-R, R]^d row-major with the first coordinate
/// most significant. Product spaces enumerate (site, mark) with the lattice
/// index outer and the mark inner; the weight of (site, s) is nu(s) because
/// lattice sites carry unit mass.
class StateSpace {
 public:
  static StateSpace finite(std::vector<double> weights, std::vector<std::string> ids = {}) {
    StateSpace s;
    s.kind_ = SpaceKind::finite;
    if (weights.empty()) throw ModelError("state space is empty");
    if (ids.empty()) {
      for (std::size_t i = 0; i < weights.size(); ++i) ids.push_back(std::to_string(i));
    }
    if (ids.size() != weights.size()) throw ModelError("point id count does not match weight count");
    std::set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw ModelError("duplicate point id '" + id + "'");
    }
    s.weights_ = std::move(weights);
    s.ids_ = std::move(ids);
    s.check_weights();
    return s;
  }

  static StateSpace lattice(int dim, int radius, Boundary boundary) {
    StateSpace s;
    s.kind_ = SpaceKind::lattice;
    s.window_ = check_window({dim, radius, boundary});
    s.build_sites();
    s.marks_ = {""};
    s.nu_ = {1.0};
    s.weights_.assign(s.site_count(), 1.0);
    s.build_ids();
    return s;
  }

  static StateSpace product(LatticeWindow window, std::vector<std::string> marks, std::vector<double> nu) {
    StateSpace s;
    s.kind_ = SpaceKind::product;
    s.window_ = check_window(window);
    if (marks.empty()) throw ModelError("mark set is empty");
    if (marks.size() != nu.size()) throw ModelError("mark count does not match nu count");
    std::set<std::string> seen;
    for (const auto& m : marks) {
      if (!seen.insert(m).second) throw ModelError("duplicate mark '" + m + "'");
    }
    for (double w : nu) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ModelError("mark weights must be positive and finite");
    }
    s.marks_ = std::move(marks);
    s.nu_ = std::move(nu);
    s.build_sites();
    s.weights_.reserve(s.site_count() * s.nu_.size());
    for (std::size_t site = 0; site < s.site_count(); ++site) {
      for (double w : s.nu_) s.weights_.push_back(w);
    }
    s.build_ids();
    return s;
  }

  SpaceKind kind() const noexcept { return kind_; }
  bool is_lattice() const noexcept { return kind_ != SpaceKind::finite; }
  std::size_t size() const noexcept { return weights_.size(); }
  double weight(std::size_t i) const { return weights_.at(i); }
  std::span<const double> weights() const noexcept { return weights_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }

  double total_mass() const noexcept {
    double total = 0;
    for (double w : weights_) total += w;
    return total;
  }

  // Lattice structure; dim() is 0 for finite spaces.
  int dim() const noexcept { return kind_ == SpaceKind::finite ? 0 : window_.dim; }
  int radius() const noexcept { return window_.radius; }
  Boundary boundary() const noexcept { return window_.boundary; }
  const LatticeWindow& window() const noexcept { return window_; }
  std::size_t site_count() const noexcept { return sites_.size() / std::max(1, window_.dim); }

  /// Number of marks; plain lattices and finite sets report one.
  std::size_t mark_count() const noexcept { return kind_ == SpaceKind::product ? marks_.size() : 1; }
  double mark_weight(std::size_t s) const { return nu_.at(s); }
  std::span<const double> mark_weights() const noexcept { return nu_; }
  const std::vector<std::string>& mark_names() const noexcept { return marks_; }
  double lattice_weight(std::size_t) const noexcept { return 1.0; }

  std::size_t site_of(std::size_t i) const noexcept {
    return kind_ == SpaceKind::product ? i / marks_.size() : i;
  }
  std::size_t mark_of(std::size_t i) const noexcept {
    return kind_ == SpaceKind::product ? i % marks_.size() : 0;
  }

  std::span<const int> coords(std::size_t i) const {
    if (kind_ == SpaceKind::finite) return {};
    const auto d = static_cast<std::size_t>(window_.dim);
    return std::span<const int>(sites_).subspan(site_of(i) * d, d);
  }

  /// Displacement coords(j) - coords(i); wrapped into [-R, R] when periodic.
  std::vector<int> displacement(std::size_t i, std::size_t j) const {
    auto a = coords(i);
    auto b = coords(j);
    std::vector<int> u(a.size());
    const int L = 2 * window_.radius + 1;
    for (std::size_t k = 0; k < a.size(); ++k) {
      int v = b[k] - a[k];
      if (window_.boundary == Boundary::periodic) {
        v = ((v + window_.radius) % L + L) % L - window_.radius;
      }
      u[k] = v;
    }
    return u;
  }

  std::optional<std::size_t> site_index(std::span<const int> c) const {
    if (kind_ == SpaceKind::finite || c.size() != static_cast<std::size_t>(window_.dim)) return std::nullopt;
    std::size_t idx = 0;
    const int L = 2 * window_.radius + 1;
    for (int v : c) {
      if (v < -window_.radius || v > window_.radius) return std::nullopt;
      idx = idx * static_cast<std::size_t>(L) + static_cast<std::size_t>(v + window_.radius);
    }
    return idx;
  }

  std::optional<std::size_t> index_of(std::span<const int> c, std::size_t mark = 0) const {
    auto site = site_index(c);
    if (!site || mark >= mark_count()) return std::nullopt;
    return *site * mark_count() + mark;
  }

  std::optional<std::size_t> index_of_id(const std::string& id) const {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i] == id) return i;
    }
    return std::nullopt;
  }

 private:
  StateSpace() = default;

  static LatticeWindow check_window(LatticeWindow w) {
    if (w.dim < 1 || w.dim > kMaxDim) throw ModelError("lattice dimension must be in [1, " + std::to_string(kMaxDim) + "]");
    if (w.radius < 0) throw ModelError("lattice radius must be non-negative");
    double count = std::pow(2.0 * w.radius + 1.0, w.dim);
    if (count > 5e6) throw ModelError("lattice window too large to enumerate");
    return w;
  }

  void build_sites() {
    const int L = 2 * window_.radius + 1;
    std::size_t count = 1;
    for (int k = 0; k < window_.dim; ++k) count *= static_cast<std::size_t>(L);
    sites_.resize(count * static_cast<std::size_t>(window_.dim));
    for (std::size_t idx = 0; idx < count; ++idx) {
      std::size_t rest = idx;
      for (int k = window_.dim - 1; k >= 0; --k) {
        sites_[idx * static_cast<std::size_t>(window_.dim) + static_cast<std::size_t>(k)] =
            static_cast<int>(rest % static_cast<std::size_t>(L)) - window_.radius;
        rest /= static_cast<std::size_t>(L);
      }
    }
  }

  void build_ids() {
    ids_.clear();
    ids_.reserve(weights_.size());
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      std::string s = "(";
      auto c = coords(i);
      for (std::size_t k = 0; k < c.size(); ++k) {
        if (k) s += ",";
        s += std::to_string(c[k]);
      }
      s += ")";
      if (kind_ == SpaceKind::product) s += ":" + marks_[mark_of(i)];
      ids_.push_back(std::move(s));
    }
  }

  void check_weights() const {
    for (double w : weights_) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ModelError("point weights must be positive and finite");
    }
  }

  SpaceKind kind_ = SpaceKind::finite;
  LatticeWindow window_{};
  std::vector<int> sites_;
  std::vector<std::string> marks_;
  std::vector<double> nu_;
  std::vector<double> weights_;
  std::vector<std::string> ids_;
};

}  // namespace contactlab::model
