#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kConfigs = CONTACTLAB_CONFIGS;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string digest(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("contactlab_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path config(const std::string& name, const json& j) {
    const auto p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  int run(const std::string& args) {
    const std::string cmd = std::string(CONTACTLAB_BIN) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path out(const std::string& name) const { return dir_ / name; }

  fs::path dir_;
};

json ring_simulation(std::size_t replicas) {
  return {{"model", (kConfigs / "models/ring7.json").string()},
          {"simulate", {{"rho", 1.0}, {"T", 1.0}, {"snapshots", {0.0, 1.0}}, {"replicas", replicas}}}};
}

}  // namespace

TEST_F(Cli, CalibrateSucceedsWithSmallResidual) {
  ASSERT_EQ(run("calibrate --config " + (kConfigs / "calibrate_finite4.json").string() + " --out " + out("cal").string()), 0);
  const auto cal = json::parse(slurp(out("cal") / "calibration.json"));
  EXPECT_LE(cal.at("criticality_residual").get<double>(), 1e-10);
  const auto manifest = json::parse(slurp(out("cal") / "manifest.json"));
  EXPECT_EQ(manifest.at("exit_code"), 0);
  EXPECT_TRUE(manifest.at("passed").get<bool>());
  EXPECT_EQ(manifest.at("command"), "calibrate");
}

TEST_F(Cli, RecurrentStationaryRunExitsWithDivergence) {
  json cfg = {{"model", (kConfigs / "models/z1_nn.json").string()},
              {"seed", 3},
              {"stationary", {{"backend", "montecarlo"}, {"T", 1000}, {"replicas", 1000}}}};
  ASSERT_EQ(run("stationary --config " + config("z1.json", cfg).string() + " --out " + out("z1").string()), 3);
  ASSERT_TRUE(fs::exists(out("z1") / "divergence.json"));
  const auto d = json::parse(slurp(out("z1") / "divergence.json"));
  EXPECT_GT(d.at("diagnostics").at("integrand_exponent").get<double>(), -1.0);
  EXPECT_EQ(json::parse(slurp(out("z1") / "manifest.json")).at("exit_code"), 3);
}

TEST_F(Cli, StochasticCommandWithoutSeedIsAConfigError) {
  EXPECT_EQ(run("simulate --config " + config("sim.json", ring_simulation(200)).string() + " --out " + out("s").string()),
            2);
  EXPECT_FALSE(fs::exists(out("s") / "moments_k1.csv"));
}

TEST_F(Cli, MalformedInputIsAConfigError) {
  std::ofstream(dir_ / "broken.json") << "{ not json";
  EXPECT_EQ(run("calibrate --config " + (dir_ / "broken.json").string() + " --out " + out("b").string()), 2);
  EXPECT_EQ(run("calibrate --config " + (dir_ / "missing.json").string()), 2);
  EXPECT_EQ(run("calibrate --no-such-flag"), 2);
  json bad = {{"model", {{"space", {{"type", "finite"}, {"weights", {1.0}}}}, {"birth", {{"form", "dense"}, {"matrix", {{-1.0}}}}}, {"death", 1.0}}}};
  EXPECT_EQ(run("calibrate --config " + config("neg.json", bad).string() + " --out " + out("n").string()), 2);
}

TEST_F(Cli, ManifestListsEveryArtifactWithItsDigest) {
  ASSERT_EQ(run("simulate --seed 17 --config " + config("sim.json", ring_simulation(200)).string() + " --out " +
                out("m").string()),
            0);
  const auto manifest = json::parse(slurp(out("m") / "manifest.json"));
  std::set<std::string> listed;
  for (const auto& f : manifest.at("files")) {
    const auto path = f.at("path").get<std::string>();
    listed.insert(path);
    const auto bytes = slurp(out("m") / path);
    EXPECT_EQ(f.at("sha256").get<std::string>(), digest(bytes)) << path;
    EXPECT_EQ(f.at("bytes").get<std::size_t>(), bytes.size()) << path;
  }
  std::set<std::string> present;
  for (const auto& e : fs::directory_iterator(out("m"))) {
    if (e.path().filename() != "manifest.json") present.insert(e.path().filename().string());
  }
  EXPECT_EQ(listed, present);
  EXPECT_EQ(manifest.at("seed"), 17);
  EXPECT_EQ(manifest.at("config_sha256").get<std::string>(), digest(slurp(dir_ / "sim.json")));
  for (const char* key : {"version", "workers", "wall_clock_seconds", "checks", "passed"}) {
    EXPECT_TRUE(manifest.contains(key)) << key;
  }
}

TEST_F(Cli, SameSeedGivesByteIdenticalOutputs) {
  auto cfg = ring_simulation(300);
  cfg["seed"] = 99;
  const auto path = config("sim.json", cfg).string();
  ASSERT_EQ(run("simulate --config " + path + " --out " + out("a").string()), 0);
  ASSERT_EQ(run("simulate --config " + path + " --out " + out("b").string()), 0);
  ASSERT_EQ(run("simulate --seed 100 --config " + path + " --out " + out("c").string()), 0);
  for (const char* f : {"moments_k1.csv", "moments_k2.csv", "simulate.json"}) {
    EXPECT_EQ(slurp(out("a") / f), slurp(out("b") / f)) << f;
  }
  EXPECT_NE(slurp(out("a") / "moments_k2.csv"), slurp(out("c") / "moments_k2.csv"));
}

TEST_F(Cli, DeterministicCommandsNeedNoSeed) {
  ASSERT_EQ(run("evolve --config " + (kConfigs / "evolve_finite4.json").string() + " --out " + out("e").string()), 0);
  EXPECT_TRUE(fs::exists(out("e") / "evolve_k3.csv"));
  ASSERT_EQ(run("stationary --config " + (kConfigs / "stationary_finite4.json").string() + " --out " + out("s").string()),
            0);
  EXPECT_TRUE(fs::exists(out("s") / "stationary_k3.csv"));
}

TEST_F(Cli, ReportAggregatesRuns) {
  ASSERT_EQ(run("calibrate --config " + (kConfigs / "calibrate_finite4.json").string() + " --out " + out("cal").string()), 0);
  ASSERT_EQ(run("evolve --config " + (kConfigs / "evolve_finite4.json").string() + " --out " + out("evo").string()), 0);
  json cfg = {{"report", {{"runs", {"cal", "evo"}}}}};
  ASSERT_EQ(run("report --config " + config("report.json", cfg).string() + " --out " + out("rep").string()), 0);
  const auto csv = slurp(out("rep") / "report.csv");
  EXPECT_NE(csv.find("criticality_residual"), std::string::npos);
  EXPECT_NE(csv.find("k1_conserved"), std::string::npos);
}
