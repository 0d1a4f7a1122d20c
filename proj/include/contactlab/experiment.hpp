#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "contactlab/criticality.hpp"
#include "contactlab/errors.hpp"
#include "contactlab/hierarchy.hpp"
#include "contactlab/hierarchy_mc.hpp"
#include "contactlab/model_io.hpp"
#include "contactlab/simulator.hpp"
#include "contactlab/walkers.hpp"

namespace contactlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using model::StateSpace;

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kDivergence = 3 };

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"calibrate", "transience",    "evolve",        "stationary",
                                             "simulate",  "verify-lemmas", "verify-bounds", "report"};
  return c;
}

inline bool is_stochastic(const std::string& command, const json& cfg) {
  if (command == "transience" || command == "simulate" || command == "verify-lemmas" || command == "verify-bounds") {
    return true;
  }
  if (command == "stationary") {
    const auto& s = cfg.contains("stationary") ? cfg.at("stationary") : json::object();
    return s.value("backend", std::string("auto")) != "dense";
  }
  return false;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-256 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ModelError("cannot open '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Shortest round-trip representation, independent of locale.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// JSON number that survives non-finite values (written as strings).
inline json jnum(double v) { return std::isfinite(v) ? json(v) : json(num(v)); }

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += "\n";
  }
  const std::string& str() const noexcept { return text_; }

 private:
  std::string text_;
};

struct Check {
  std::string name;
  bool passed;
  json detail;
};

/// Everything a command needs: parsed config, output directory, seed.
class Run {
 public:
  Run(std::string command, const fs::path& config_path, std::optional<std::uint64_t> seed, fs::path out)
      : command_(std::move(command)), out_(std::move(out)) {
    config_text_ = read_file(config_path);
    config_hash_ = sha256_hex(config_text_);
    base_ = config_path.parent_path();
    try {
      config_ = json::parse(config_text_);
    } catch (const json::exception& e) {
      throw ModelError("config is not valid JSON: " + std::string(e.what()));
    }
    if (!config_.is_object()) throw ModelError("config must be a JSON object");
    if (seed) {
      seed_ = seed;
    } else if (config_.contains("seed")) {
      if (!config_.at("seed").is_number_unsigned()) throw ModelError("seed must be a non-negative integer");
      seed_ = config_.at("seed").get<std::uint64_t>();
    }
    if (is_stochastic(command_, config_) && !seed_) {
      throw ModelError("command '" + command_ + "' is stochastic and needs a seed (--seed or \"seed\")");
    }
    workers_ = config_.value("workers", 1u);
    if (workers_ < 1) throw ModelError("workers must be at least 1");
    fs::create_directories(out_);
  }

  const std::string& command() const noexcept { return command_; }
  const json& config() const noexcept { return config_; }
  const fs::path& out() const noexcept { return out_; }
  const fs::path& base() const noexcept { return base_; }
  std::uint64_t seed() const { return seed_.value_or(0); }
  unsigned workers() const noexcept { return workers_; }

  /// Command block, or an empty object.
  json section(const std::string& key) const {
    if (!config_.contains(key)) return json::object();
    if (!config_.at(key).is_object()) throw ModelError("'" + key + "' must be an object");
    return config_.at(key);
  }

  model::ModelConfig load_model() const {
    if (!config_.contains("model")) throw ModelError("config needs a 'model' (path or inline object)");
    const auto& m = config_.at("model");
    if (m.is_string()) return model::load_model((base_ / m.get<std::string>()).string());
    return model::parse_model(m);
  }

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(out_ / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + (out_ / name).string() + "'");
    f << content;
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  void check(std::string name, bool passed, json detail = json::object()) {
    checks_.push_back({std::move(name), passed, std::move(detail)});
  }
  const std::vector<Check>& checks() const noexcept { return checks_; }
  bool all_passed() const {
    return std::all_of(checks_.begin(), checks_.end(), [](const Check& c) { return c.passed; });
  }

  /// Lists every file in the output directory (except the manifest) with
  /// its digest.
  void write_manifest(int exit_code, double seconds) {
    json files = json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(out_)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
      const auto bytes = read_file(p);
      files.push_back({{"path", fs::relative(p, out_).generic_string()},
                       {"sha256", sha256_hex(bytes)},
                       {"bytes", bytes.size()}});
    }
    json checks = json::array();
    for (const auto& c : checks_) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    json m = {{"artifact", "contactlab"},
              {"version", kVersion},
              {"command", command_},
              {"config_sha256", config_hash_},
              {"seed", seed_ ? json(*seed_) : json(nullptr)},
              {"workers", workers_},
              {"wall_clock_seconds", seconds},
              {"exit_code", exit_code},
              {"passed", all_passed()},
              {"checks", checks},
              {"files", files}};
    write_json("manifest.json", m);
  }

 private:
  std::string command_;
  fs::path out_;
  fs::path base_;
  std::string config_text_;
  std::string config_hash_;
  json config_;
  std::optional<std::uint64_t> seed_;
  unsigned workers_ = 1;
  std::vector<Check> checks_;
};

namespace detail {

inline criticality::PowerControls power_controls(const Run& run) {
  const auto c = run.section("calibrate");
  criticality::PowerControls pc;
  pc.tol = c.value("tol", pc.tol);
  pc.max_iters = c.value("max_iters", pc.max_iters);
  if (!(pc.tol > 0) || pc.max_iters < 1) throw ModelError("calibrate tolerances must be positive");
  return pc;
}

inline criticality::TransformedModel calibrated(const Run& run, criticality::GroundState* original = nullptr) {
  const auto cfg = run.load_model();
  return criticality::calibrate(cfg.model, cfg.space, power_controls(run), original);
}

inline double positive(const json& j, const char* key, double fallback) {
  const double v = j.value(key, fallback);
  if (!(v > 0) || !std::isfinite(v)) throw ModelError(std::string(key) + " must be positive");
  return v;
}

inline std::size_t replicas(const json& j, std::size_t fallback) {
  const auto v = j.value("replicas", fallback);
  if (v < 2) throw ModelError("replicas must be at least 2");
  return v;
}

inline std::vector<double> times(const json& j, const char* key, std::vector<double> fallback) {
  auto t = j.contains(key) ? j.at(key).get<std::vector<double>>() : std::move(fallback);
  if (t.empty() || !std::is_sorted(t.begin(), t.end()) || t.front() < 0) {
    throw ModelError(std::string(key) + " must be a non-empty increasing list of times");
  }
  return t;
}

inline std::vector<std::string> point_ids(const StateSpace& s, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(s.id(i));
  return out;
}

inline std::vector<std::string> tuple_header(int n, std::vector<std::string> pre, std::vector<std::string> post) {
  for (int i = 1; i <= n; ++i) pre.push_back("x" + std::to_string(i));
  pre.insert(pre.end(), post.begin(), post.end());
  return pre;
}

inline void tensor_rows(Csv& csv, const StateSpace& space, const hierarchy::CorrelationTensor& k,
                        const std::vector<std::string>& prefix, const hierarchy::CorrelationTensor* se = nullptr) {
  for (std::size_t f = 0; f < k.size(); ++f) {
    auto row = prefix;
    for (const auto& id : point_ids(space, k.unflatten(f))) row.push_back(id);
    row.push_back(num(k[f]));
    if (se) row.push_back(num((*se)[f]));
    csv.row(row);
  }
}

inline walkers::TransienceControls transience_controls(const Run& run, const json& j) {
  walkers::TransienceControls c;
  c.T = positive(j, "T", c.T);
  c.replicas = replicas(j, c.replicas);
  c.points_per_decade = j.value("points_per_decade", c.points_per_decade);
  c.t_first = positive(j, "t_first", c.t_first);
  c.epsilon = positive(j, "epsilon", c.epsilon);
  c.seed = run.seed();
  c.workers = run.workers();
  if (c.points_per_decade < 2) throw ModelError("points_per_decade must be at least 2");
  return c;
}

inline std::vector<std::vector<long>> displacements(const json& j) {
  if (!j.contains("displacements")) return {{0}, {1}, {2}};
  auto d = j.at("displacements").get<std::vector<std::vector<long>>>();
  if (d.empty()) throw ModelError("displacements must not be empty");
  return d;
}

inline json report_json(const walkers::TransienceReport& r) {
  json pairs = json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"label", p.label},
                     {"integral_at_T", p.mean.back()},
                     {"integral_at_T_se", p.se.back()},
                     {"extrapolated", p.extrapolated},
                     {"extrapolated_se", p.extrapolated_se},
                     {"integrand_exponent", jnum(p.integrand_exponent)},
                     {"growth_exponent", jnum(p.growth_exponent)},
                     {"monotonic_violations", p.monotonic_violations}});
  }
  return {{"H_hat", r.H_hat},
          {"stderr", r.stderr_},
          {"tail_exponent_fit", jnum(r.tail_exponent_fit)},
          {"growth_exponent", jnum(r.growth_exponent)},
          {"horizon", r.horizon},
          {"converged", r.converged},
          {"variant", r.variant},
          {"monotonic_violations", r.monotonic_violations},
          {"pairs", pairs}};
}

inline void curves_csv(Run& run, const std::string& name, const walkers::TransienceReport& r) {
  Csv csv({"label", "t", "integral", "stderr"});
  for (const auto& p : r.pairs) {
    for (std::size_t j = 0; j < p.times.size(); ++j) csv.row({"\"" + p.label + "\"", num(p.times[j]), num(p.mean[j]), num(p.se[j])});
  }
  run.write(name, csv.str());
}

/// H for the lattice model: full variant over the default start pairs.
inline walkers::TransienceReport measure_H(const Run& run, const walkers::LatticeWalkerModel& m, const json& j) {
  auto c = transience_controls(run, j);
  const auto [starts, labels] = j.contains("displacements") ? hierarchy::displacement_starts(m, displacements(j))
                                                            : walkers::default_lattice_starts(m);
  return walkers::estimate_H(m, starts, labels, m.dim(), c);
}

}  // namespace detail

// ---------------------------------------------------------------- commands

inline void cmd_calibrate(Run& run) {
  const auto cfg = run.load_model();
  const auto diag = model::validate_model(cfg.model, cfg.space);
  criticality::GroundState original;
  const auto tm = criticality::calibrate(cfg.model, cfg.space, detail::power_controls(run), &original);
  const auto& gs = tm.ground();
  const double tol = detail::positive(run.section("calibrate"), "residual_tol", 1e-10);
  const double residual = criticality::criticality_residual(tm);
  json out = {{"r", original.eigenvalue},
              {"r_after_rescale", gs.eigenvalue},
              {"iterations", original.iterations},
              {"operator_residual", original.residual},
              {"bracket", {original.bracket_lo, original.bracket_hi}},
              {"criticality_residual", residual},
              {"normalization", criticality::to_string(gs.normalization)},
              {"model", {{"v_min", diag.v_min}, {"v_max", diag.v_max}, {"birth_column_mass", diag.birth_column_mass}}}};
  if (gs.mark_q) out["q"] = std::vector<double>(gs.mark_q->data(), gs.mark_q->data() + gs.mark_q->size());
  run.check("model_valid", diag.passed());
  run.check("criticality_residual", residual <= tol, {{"value", residual}, {"tol", tol}});
  if (tm.has_jump()) {
    const double jr = criticality::jump_criticality_residual(tm.model(), tm.space(), gs);
    out["jump_criticality_residual"] = jr;
    run.check("jump_criticality_residual", jr <= tol, {{"value", jr}, {"tol", tol}});
  }
  if (gs.mark_q) {
    const auto th = criticality::theta_kernel(tm);
    double worst = 0;
    for (Eigen::Index s = 0; s < th.theta.rows(); ++s) worst = std::max(worst, std::abs(th.row_mass(s) - 1.0));
    out["theta_row_mass_error"] = worst;
  }
  run.write_json("calibration.json", out);

  Csv csv({"point", "psi", "mbar", "V"});
  for (std::size_t i = 0; i < tm.size(); ++i) {
    csv.row({tm.space().id(i), num(tm.psi(i)), num(tm.mbar(i)), num(tm.death(i))});
  }
  run.write("ground_state.csv", csv.str());

  json t = {{"points", detail::point_ids(tm.space(), [&] {
               std::vector<std::size_t> v(tm.size());
               std::iota(v.begin(), v.end(), std::size_t{0});
               return v;
             }())}};
  t["psi"] = std::vector<double>(gs.psi.data(), gs.psi.data() + gs.psi.size());
  t["mbar"] = std::vector<double>(tm.mbar_vector().data(), tm.mbar_vector().data() + tm.mbar_vector().size());
  t["death"] = std::vector<double>(tm.death_vector().data(), tm.death_vector().data() + tm.death_vector().size());
  auto rows = [](const Eigen::MatrixXd& M) {
    json r = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(M.cols()));
      for (Eigen::Index j = 0; j < M.cols(); ++j) row[static_cast<std::size_t>(j)] = M(i, j);
      r.push_back(row);
    }
    return r;
  };
  if (tm.has_dense()) {
    t["b"] = rows(tm.dense_b());
    if (tm.has_jump()) t["jump_b"] = rows(tm.dense_jump_b());
  }
  run.write_json("transformed_model.json", t);
}

inline void cmd_transience(Run& run) {
  const auto tm = detail::calibrated(run);
  const auto j = run.section("transience");
  const auto variant = j.value("variant", std::string("full"));
  walkers::TransienceReport rep;
  if (tm.translation_invariant()) {
    walkers::LatticeWalkerModel m(tm);
    if (variant == "sufficient") {
      walkers::SufficientControls c;
      c.T = detail::positive(j, "T", c.T);
      c.replicas = detail::replicas(j, c.replicas);
      c.points_per_decade = j.value("points_per_decade", c.points_per_decade);
      c.t_first = detail::positive(j, "t_first", c.t_first);
      c.epsilon = detail::positive(j, "epsilon", c.epsilon);
      c.target_radius = j.value("target_radius", c.target_radius);
      c.seed = run.seed();
      c.workers = run.workers();
      rep = walkers::estimate_H_sufficient(m, c);
    } else if (variant == "full") {
      rep = detail::measure_H(run, m, j);
    } else {
      throw ModelError("transience variant must be 'full' or 'sufficient'");
    }
  } else {
    if (!j.value("allow_finite", false)) {
      throw ModelError("transience needs an unbounded translation-invariant lattice model (or allow_finite: true)");
    }
    if (variant != "full") throw ModelError("the sufficient variant needs a lattice model");
    walkers::FiniteWalkerModel m(tm);
    const auto [starts, labels] = walkers::all_finite_starts(m);
    rep = walkers::estimate_H(m, starts, labels, 0, detail::transience_controls(run, j));
  }
  run.write_json("transience.json", detail::report_json(rep));
  detail::curves_csv(run, "transience_curves.csv", rep);
  run.check("transience_converged", rep.converged,
            {{"tail_exponent_fit", jnum(rep.tail_exponent_fit)}, {"growth_exponent", jnum(rep.growth_exponent)}});
  run.check("running_integral_monotone", rep.monotonic_violations == 0);
}

inline void cmd_evolve(Run& run) {
  auto tm = detail::calibrated(run);
  const auto j = run.section("evolve");
  if (!tm.has_dense()) throw ModelError("evolve needs a finite space (dense backend)");
  const int N = j.value("N", 2);
  if (N < 1 || N > 4) throw ModelError("evolve: N must be in 1..4");
  const double rho = detail::positive(j, "rho", 1.0);
  const auto times = detail::times(j, "times", {0, 0.5, 1, 2});
  hierarchy::EvolveControls ec;
  ec.step = detail::positive(j, "step", ec.step);
  ec.tol = detail::positive(j, "tol", ec.tol);
  ec.max_refinements = j.value("max_refinements", ec.max_refinements);
  std::vector<hierarchy::CorrelationTensor> init;
  for (int n = 1; n <= N; ++n) init.push_back(hierarchy::poisson_initial(n, rho, tm.size()));
  const auto traj = hierarchy::evolve_hierarchy(tm, init, times, ec);
  double drift = 0, lowest = 0;
  for (int n = 1; n <= N; ++n) {
    Csv csv(detail::tuple_header(n, {"t"}, {"value"}));
    for (std::size_t i = 0; i < times.size(); ++i) {
      const auto& k = traj.levels[i][static_cast<std::size_t>(n - 1)];
      detail::tensor_rows(csv, tm.space(), k, {num(times[i])});
      lowest = std::min(lowest, k.min());
      if (n == 1) {
        for (std::size_t f = 0; f < k.size(); ++f) drift = std::max(drift, std::abs(k[f] - rho));
      }
    }
    run.write("evolve_k" + std::to_string(n) + ".csv", csv.str());
  }
  run.write_json("evolve.json", {{"rho", rho},
                                 {"N", N},
                                 {"error_estimate", traj.error_estimate},
                                 {"step_used", traj.step_used},
                                 {"k1_max_drift", drift},
                                 {"min_entry", lowest}});
  run.check("k1_conserved", drift <= std::max(1e-10, 10 * ec.tol) * std::max(1.0, rho), {{"drift", drift}});
  run.check("nonnegative", lowest >= -1e-12, {{"min_entry", lowest}});
}

inline void cmd_stationary(Run& run) {
  auto tm = detail::calibrated(run);
  const auto j = run.section("stationary");
  const int N = j.value("N", 2);
  const double rho = detail::positive(j, "rho", 1.0);
  std::string backend = j.value("backend", std::string("auto"));
  if (backend == "auto") backend = tm.translation_invariant() && tm.space().boundary() == model::Boundary::unbounded
                                       ? "montecarlo"
                                       : "dense";
  if (backend == "dense") {
    if (!tm.has_dense()) throw ModelError("dense backend needs a finite space");
    if (N < 1 || N > 4) throw ModelError("stationary: N must be in 1..4");
    if (j.contains("birth_scale")) tm = tm.with_birth_scaled(detail::positive(j, "birth_scale", 1.0));
    hierarchy::StationaryControls sc;
    sc.t0 = detail::positive(j, "t0", sc.t0);
    sc.growth = detail::positive(j, "growth", sc.growth);
    sc.tol = detail::positive(j, "tol", sc.tol);
    sc.t_max = detail::positive(j, "t_max", sc.t_max);
    auto sol = hierarchy::stationary_k_dense(tm, rho, N, sc);
    json out = {{"backend", "dense"}, {"rho", rho}, {"N", N}, {"residuals", sol.residuals}};
    double worst = 0;
    for (std::size_t n = 0; n < sol.tensors.size(); ++n) {
      Csv csv(detail::tuple_header(static_cast<int>(n + 1), {}, {"value"}));
      detail::tensor_rows(csv, tm.space(), sol.tensors[n], {});
      run.write("stationary_k" + std::to_string(n + 1) + ".csv", csv.str());
      worst = std::max(worst, sol.residuals[n] / std::max(1.0, sol.tensors[n].sup_norm()));
    }
    const double tol = detail::positive(j, "residual_tol", 1e-8);
    run.check("stationary_residual", worst <= tol, {{"relative_residual", worst}, {"tol", tol}});
    if (j.contains("H")) {
      sol.H_used = detail::positive(j, "H", 1.0);
      const auto bc = hierarchy::factorial_bound_check(sol);
      out["factorial_bound_ratios"] = bc.ratios;
      out["H_used"] = sol.H_used;
      run.check("factorial_bound", bc.passed);
    }
    if (j.contains("convergence_times")) {
      const auto times = detail::times(j, "convergence_times", {});
      const auto rep = hierarchy::convergence_check_dense(N, tm, rho, times, {}, sc);
      Csv csv({"t", "distance"});
      for (std::size_t i = 0; i < rep.times.size(); ++i) csv.row({num(rep.times[i]), num(rep.distances[i])});
      run.write("convergence.csv", csv.str());
      run.check("convergence", rep.converged);
    }
    run.write_json("stationary.json", out);
    return;
  }
  if (backend != "montecarlo") throw ModelError("stationary backend must be dense, montecarlo or auto");
  if (!tm.translation_invariant()) throw ModelError("the Monte Carlo backend needs a translation-invariant lattice model");
  if (N < 1 || N > 2) throw ModelError("the Monte Carlo backend supports N <= 2");
  walkers::LatticeWalkerModel m(tm);
  hierarchy::MonteCarloControls mc;
  mc.T = detail::positive(j, "T", mc.T);
  mc.replicas = detail::replicas(j, mc.replicas);
  mc.points_per_decade = j.value("points_per_decade", mc.points_per_decade);
  mc.t_first = detail::positive(j, "t_first", mc.t_first);
  mc.seed = run.seed() ^ (stream_tag::stationary << 56);
  mc.workers = run.workers();
  const auto disp = detail::displacements(j);
  const auto st = hierarchy::stationary_k_mc(N, m, rho, disp, mc, detail::positive(j, "epsilon", 0.1));
  Csv csv({"displacement", "value", "stderr"});
  for (std::size_t p = 0; p < st.labels.size(); ++p) csv.row({"\"" + st.labels[p] + "\"", num(st.values[p]), num(st.stderrs[p])});
  run.write("stationary_k" + std::to_string(N) + ".csv", csv.str());
  json out = {{"backend", "montecarlo"}, {"rho", rho}, {"N", N}};
  if (N == 2) {
    out["integral"] = detail::report_json(st.integral);
    detail::curves_csv(run, "stationary_curves.csv", st.integral);
  }
  if (N == 2 && j.contains("convergence")) {
    const auto cj = j.at("convergence");
    hierarchy::MonteCarloControls cc = mc;
    cc.T = detail::positive(cj, "T", mc.T);
    cc.replicas = detail::replicas(cj, mc.replicas);
    const auto conv = hierarchy::convergence_check_mc(m, st, cc);
    Csv c2({"t", "distance", "stderr"});
    for (std::size_t i = 0; i < conv.times.size(); ++i) c2.row({num(conv.times[i]), num(conv.distances[i]), num(conv.stderrs[i])});
    run.write("convergence.csv", c2.str());
    out["convergence"] = {{"final_distance", conv.distances.back()}, {"final_stderr", conv.stderrs.back()}};
    run.check("convergence", conv.converged);
  }
  run.write_json("stationary.json", out);
}

inline void cmd_simulate(Run& run) {
  const auto tm = detail::calibrated(run);
  if (!tm.has_dense()) throw ModelError("simulate needs a finite space");
  if (tm.space().is_lattice() && tm.space().boundary() == model::Boundary::unbounded) {
    throw ModelError("simulate needs a finite space; use a periodic lattice window");
  }
  const auto j = run.section("simulate");
  const double rho = detail::positive(j, "rho", 1.0);
  simulator::ReplicaControls c;
  c.T = detail::positive(j, "T", 2.0);
  c.snapshot_times = detail::times(j, "snapshots", {0, c.T / 2, c.T});
  if (c.snapshot_times.back() > c.T) throw ModelError("snapshots must lie within [0, T]");
  c.replicas = detail::replicas(j, 10000);
  c.max_order = j.value("max_order", 2);
  if (c.max_order < 1 || c.max_order > 3) throw ModelError("max_order must be 1, 2 or 3");
  c.options.event_cap = j.value("event_cap", c.options.event_cap);
  c.seed = run.seed();
  c.workers = run.workers();
  const auto sum = simulator::simulate_replicas(tm, rho, c);

  for (int n = 1; n <= c.max_order; ++n) {
    Csv csv(detail::tuple_header(n, {"t"}, {"value", "stderr"}));
    for (std::size_t s = 0; s < sum.snapshot_times.size(); ++s) {
      const auto& e = sum.moments[s][static_cast<std::size_t>(n - 1)];
      detail::tensor_rows(csv, tm.space(), e.values, {num(sum.snapshot_times[s])}, &e.stderrs);
    }
    run.write("moments_k" + std::to_string(n) + ".csv", csv.str());
  }

  // k1 against psi-proportional density: in the mbar convention k1 = rho
  double worst_z = 0;
  for (std::size_t s = 0; s < sum.snapshot_times.size(); ++s) {
    const auto& e = sum.moments[s][0];
    for (std::size_t f = 0; f < e.values.size(); ++f) {
      if (e.stderrs[f] > 0) worst_z = std::max(worst_z, std::abs(e.values[f] - rho) / e.stderrs[f]);
    }
  }
  const double death_rate = sum.particle_time > 0 ? static_cast<double>(sum.deaths) / sum.particle_time : 0.0;
  json out = {{"rho", rho},
              {"replicas", sum.replicas},
              {"truncated", sum.truncated},
              {"deaths", sum.deaths},
              {"particle_time", sum.particle_time},
              {"deaths_per_particle_time", death_rate},
              {"mean_particles", sum.mean_particles},
              {"mean_particles_se", sum.mean_particles_se},
              {"k1_max_z", worst_z}};
  run.check("density_conserved", worst_z <= j.value("z_max", 4.0), {{"max_z", worst_z}});

  if (j.value("compare_hierarchy", false)) {
    std::vector<hierarchy::CorrelationTensor> init;
    for (int n = 1; n <= c.max_order; ++n) init.push_back(hierarchy::poisson_initial(n, rho, tm.size()));
    const auto traj = hierarchy::evolve_hierarchy(tm, init, sum.snapshot_times);
    double zmax = 0;
    for (std::size_t s = 0; s < sum.snapshot_times.size(); ++s) {
      for (int n = 1; n <= c.max_order; ++n) {
        const auto& e = sum.moments[s][static_cast<std::size_t>(n - 1)];
        const auto& k = traj.levels[s][static_cast<std::size_t>(n - 1)];
        for (std::size_t f = 0; f < k.size(); ++f) {
          const double diff = std::abs(e.values[f] - k[f]);
          if (e.stderrs[f] > 0) {
            zmax = std::max(zmax, diff / e.stderrs[f]);
          } else if (diff > 1e-12) {
            zmax = std::numeric_limits<double>::infinity();
          }
        }
      }
    }
    out["hierarchy_max_z"] = jnum(zmax);
    run.check("matches_hierarchy", zmax <= 3.0, {{"max_z", jnum(zmax)}});
  }
  run.write_json("simulate.json", out);

  if (j.value("record_events", false)) {
    // one replica on its own stream, as newline-delimited records
    Rng rng = make_stream(run.seed(), 0, stream_tag::simulator * 1000003ULL + 1);
    simulator::ContactRates rates(tm);
    auto opt = c.options;
    opt.record_events = true;
    const auto log = simulator::simulate_contact(rates, simulator::poisson_configuration(tm, rho, rng), c.T, {}, rng, opt);
    std::string text;
    for (const auto& e : log.events) {
      json r = {{"time", e.time}, {"kind", simulator::to_string(e.kind)}, {"point", tm.space().id(e.from)}};
      if (e.kind != simulator::EventKind::death) r["to"] = tm.space().id(e.to);
      text += r.dump() + "\n";
    }
    run.write("events.ndjson", text);
  }
}

inline void cmd_verify_lemmas(Run& run) {
  const auto tm = detail::calibrated(run);
  if (!tm.translation_invariant()) throw ModelError("verify-lemmas needs a translation-invariant lattice model");
  const auto j = run.section("verify_lemmas");
  walkers::LatticeWalkerModel m(tm);
  json out;

  // convolution powers of the normalized stencil
  const int n_max = j.value("n_max", 64);
  model::Stencil alpha = m.alpha().divided(m.alpha().mass());
  const auto conv = walkers::convolution_bound_check(alpha, n_max);
  Csv cc({"n", "sup", "scaled", "at_origin"});
  for (std::size_t i = 0; i < conv.sup.size(); ++i) {
    cc.row({std::to_string(i + 1), num(conv.sup[i]), num(conv.scaled[i]), num(conv.at_origin[i])});
  }
  run.write("convolution.csv", cc.str());
  out["convolution"] = {{"max_scaled", conv.max_scaled}, {"median_scaled", conv.median_scaled},
                        {"mass_deficit", conv.mass_deficit}, {"passed", conv.passed()}};
  run.check("convolution_bound", conv.passed());

  // heat bound
  walkers::HeatControls hc;
  hc.times = detail::times(j, "heat_times", walkers::geometric_grid(1, 100, 8));
  hc.replicas = detail::replicas(j.value("heat", json::object()), 100000);
  hc.seed = run.seed();
  hc.workers = run.workers();
  hc.start_mark = j.value("start_mark", 0);
  if (j.contains("target")) hc.target = j.at("target").get<std::vector<long>>();
  const auto heat = walkers::heat_bound_check(m, hc);
  Csv hcsv({"t", "singular", "regular", "regular_se", "estimate", "scaled", "scaled_se", "eb", "eb_se", "zero_jump",
            "zero_jump_se"});
  for (std::size_t i = 0; i < heat.times.size(); ++i) {
    hcsv.row({num(heat.times[i]), num(heat.singular[i]), num(heat.regular[i]), num(heat.regular_se[i]),
              num(heat.estimate[i]), num(heat.scaled[i]), num(heat.scaled_se[i]), num(heat.eb[i]), num(heat.eb_se[i]),
              num(heat.zero_jump[i]), num(heat.zero_jump_se[i])});
  }
  run.write("heat.csv", hcsv.str());
  out["heat"] = {{"kappa", heat.kappa}, {"sup_scaled", heat.sup_scaled}, {"slope", heat.slope},
                 {"slope_se", heat.slope_se}, {"flat", heat.flat}, {"bound_ok", heat.bound_ok}};
  run.check("heat_bound", heat.passed());

  // Poisson domination of the jump count
  const auto th = criticality::theta_kernel(tm);
  walkers::DominationControls dc;
  dc.times = detail::times(j, "domination_times", {0.25, 0.5, 1, 2, 3, 4, 6, 8});
  dc.ks = j.contains("domination_ks") ? j.at("domination_ks").get<std::vector<long>>()
                                      : std::vector<long>{0, 1, 2, 3, 4, 6, 8, 12};
  dc.replicas = detail::replicas(j.value("domination", json::object()), 100000);
  dc.seed = run.seed();
  dc.workers = run.workers();
  if (j.contains("lambda0")) dc.lambda0 = detail::positive(j, "lambda0", 1.0);
  const auto dom = walkers::poisson_domination_check(th.v, th.theta, th.nu, dc);
  Csv dcsv({"start_mark", "t", "k", "estimate", "stderr", "exact", "passed"});
  for (const auto& cell : dom.cells) {
    dcsv.row({std::to_string(cell.start_mark), num(cell.t), std::to_string(cell.k), num(cell.estimate), num(cell.se),
              num(cell.exact), cell.passed ? "1" : "0"});
  }
  run.write("domination.csv", dcsv.str());
  out["domination"] = {{"lambda0", dom.lambda0}, {"passed", dom.passed()}};
  run.check("poisson_domination", dom.passed());

  // lower tail of the dominating Poisson count
  const double lambda0 = dom.lambda0;
  std::vector<double> lt_default;
  for (int k = 2; k <= 50; ++k) lt_default.push_back(k / lambda0);
  const auto lt = walkers::lower_tail_bound_check(lambda0, detail::times(j, "lower_tail_times", lt_default),
                                                  j.value("M", 1.0));
  Csv lcsv({"t", "excluded", "lhs", "rhs", "ratio"});
  for (const auto& p : lt.points) lcsv.row({num(p.t), p.excluded ? "1" : "0", num(p.lhs), num(p.rhs), num(p.ratio)});
  run.write("lower_tail.csv", lcsv.str());
  out["lower_tail"] = {{"lambda0", lt.lambda0}, {"B", walkers::kLowerTailB}, {"max_ratio", lt.max_ratio}};
  run.check("lower_tail_bound", lt.passed(), {{"max_ratio", lt.max_ratio}});

  run.write_json("lemmas.json", out);
}

inline void cmd_verify_bounds(Run& run) {
  const auto tm = detail::calibrated(run);
  if (!tm.translation_invariant()) throw ModelError("verify-bounds needs a translation-invariant lattice model");
  const auto j = run.section("verify_bounds");
  const double rho = detail::positive(j, "rho", 1.0);
  walkers::LatticeWalkerModel m(tm);
  const auto H = detail::measure_H(run, m, j);
  detail::curves_csv(run, "transience_curves.csv", H);
  if (!H.converged) {
    throw DivergenceError("the two-walker integral does not converge; no finite H",
                          {{"tail_exponent_fit", jnum(H.tail_exponent_fit)}, {"growth_exponent", jnum(H.growth_exponent)}});
  }
  hierarchy::MonteCarloControls mc;
  mc.T = detail::positive(j, "T", mc.T);
  mc.replicas = detail::replicas(j, mc.replicas);
  mc.points_per_decade = j.value("points_per_decade", mc.points_per_decade);
  mc.seed = run.seed() ^ (stream_tag::stationary << 56);
  mc.workers = run.workers();
  const auto st = hierarchy::stationary_k_mc(2, m, rho, detail::displacements(j), mc);
  std::vector<double> k1(st.values.size(), rho);
  const auto bc = hierarchy::factorial_bound_check(rho, H.H_hat, {k1, st.values}, {{}, st.stderrs});

  // K_2 <= 4 K_1 H + rho^2 with K_n the sup over the sampled grid
  std::size_t arg = 0;
  for (std::size_t p = 0; p < st.values.size(); ++p) {
    if (st.values[p] > st.values[arg]) arg = p;
  }
  const double K2 = st.values[arg], K2_se = st.stderrs[arg];
  const double rec = 4 * rho * H.H_hat + rho * rho;
  const bool rec_ok = K2 <= rec + 3 * K2_se;

  Csv csv({"n", "K_n", "stderr", "factorial_bound", "ratio"});
  const double D = hierarchy::factorial_series_D(rho, H.H_hat);
  csv.row({"1", num(rho), "0", num(D * H.H_hat), num(bc.ratios[0])});
  csv.row({"2", num(K2), num(K2_se), num(D * H.H_hat * H.H_hat * 4), num(bc.ratios[1])});
  run.write("bounds.csv", csv.str());
  run.write_json("bounds.json", {{"rho", rho},
                                 {"H", detail::report_json(H)},
                                 {"D", D},
                                 {"ratios", bc.ratios},
                                 {"ratio_se", bc.ratio_se},
                                 {"recurrence", {{"K2", K2}, {"K2_se", K2_se}, {"bound", rec}, {"passed", rec_ok}}}});
  run.check("factorial_bound", bc.passed, {{"ratios", bc.ratios}});
  run.check("recurrence_inequality", rec_ok, {{"K2", K2}, {"bound", rec}});
}

/// Claim a check belongs to in the aggregated table.
inline std::string claim_of(const std::string& command) {
  static const std::map<std::string, std::string> claims = {
      {"calibrate", "critical calibration"},
      {"transience", "two-walker transience"},
      {"evolve", "correlation dynamics"},
      {"simulate", "correlation dynamics"},
      {"stationary", "stationary correlations and convergence"},
      {"verify-bounds", "stationary correlations and convergence"},
      {"verify-lemmas", "marked-model lemmas"}};
  const auto it = claims.find(command);
  return it == claims.end() ? "other" : it->second;
}

inline void cmd_report(Run& run) {
  const auto j = run.section("report");
  if (!j.contains("runs") || !j.at("runs").is_array() || j.at("runs").empty()) {
    throw ModelError("report needs a non-empty 'runs' list of output directories");
  }
  Csv csv({"claim", "run", "command", "check", "passed"});
  std::map<std::string, bool> claims;
  json runs = json::array();
  for (const auto& r : j.at("runs")) {
    const fs::path dir = run.base() / r.get<std::string>();
    json manifest;
    try {
      manifest = json::parse(read_file(dir / "manifest.json"));
    } catch (const json::exception& e) {
      throw ModelError("manifest in '" + dir.string() + "' is not valid JSON");
    }
    const auto command = manifest.value("command", std::string("?"));
    const auto claim = claim_of(command);
    bool ok = manifest.value("exit_code", 1) == 0;
    for (const auto& c : manifest.value("checks", json::array())) {
      const bool p = c.value("passed", false);
      ok = ok && p;
      csv.row({"\"" + claim + "\"", "\"" + r.get<std::string>() + "\"", command, c.value("name", std::string("?")),
               p ? "1" : "0"});
    }
    claims.try_emplace(claim, true);
    claims[claim] = claims[claim] && ok;
    runs.push_back({{"run", r}, {"command", command}, {"exit_code", manifest.value("exit_code", -1)}, {"passed", ok}});
  }
  json table = json::array();
  for (const auto& [claim, ok] : claims) {
    table.push_back({{"claim", claim}, {"passed", ok}});
    run.check(claim, ok);
  }
  run.write("report.csv", csv.str());
  run.write_json("report.json", {{"runs", runs}, {"claims", table}});
}

/// Runs one command and always leaves a manifest behind once the output
/// directory exists. Returns the process exit code.
inline int execute(const std::string& command, const fs::path& config, std::optional<std::uint64_t> seed,
                   const fs::path& out, std::ostream& err) {
  std::optional<Run> run;
  const auto start = std::chrono::steady_clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  try {
    if (std::find(commands().begin(), commands().end(), command) == commands().end()) {
      throw ModelError("unknown command '" + command + "'");
    }
    run.emplace(command, config, seed, out);
    if (command == "calibrate") cmd_calibrate(*run);
    if (command == "transience") cmd_transience(*run);
    if (command == "evolve") cmd_evolve(*run);
    if (command == "stationary") cmd_stationary(*run);
    if (command == "simulate") cmd_simulate(*run);
    if (command == "verify-lemmas") cmd_verify_lemmas(*run);
    if (command == "verify-bounds") cmd_verify_bounds(*run);
    if (command == "report") cmd_report(*run);
    const int code = run->all_passed() ? kOk : kCheckFailed;
    for (const auto& c : run->checks()) err << (c.passed ? "PASS " : "FAIL ") << c.name << "\n";
    run->write_manifest(code, seconds());
    return code;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    if (run) {
      run->write_json("divergence.json", {{"message", e.what()}, {"diagnostics", e.diagnostics()}});
      run->write_manifest(kDivergence, seconds());
    }
    return kDivergence;
  } catch (const ConvergenceError& e) {
    err << "numerical failure: " << e.what() << "\n";
    if (run) {
      run->write_json("divergence.json", {{"message", e.what()}});
      run->write_manifest(kDivergence, seconds());
    }
    return kDivergence;
  } catch (const AccuracyError& e) {
    err << "numerical failure: " << e.what() << " (achieved " << e.achieved() << ")\n";
    if (run) {
      run->write_json("divergence.json", {{"message", e.what()}, {"achieved", e.achieved()}});
      run->write_manifest(kDivergence, seconds());
    }
    return kDivergence;
  } catch (const ModelError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace contactlab::cli
