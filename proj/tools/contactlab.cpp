#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "contactlab/experiment.hpp"

int main(int argc, char** argv) {
  using namespace contactlab;
  CLI::App app{"contactlab: critical contact processes and their correlation hierarchy"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  for (const auto& name : cli::commands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "master seed for stochastic commands");
    sub->add_option("--out", out, "output directory (default: $CONTACTLAB_OUT, then ./contactlab-out)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kConfigError;
  }
  if (out.empty()) {
    const char* env = std::getenv("CONTACTLAB_OUT");
    out = env && *env ? env : "contactlab-out";
  }
  const std::string command = app.get_subcommands().front()->get_name();
  return cli::execute(command, config, seed, out, std::cerr);
}
