#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "pointbirth/cli.hpp"

namespace cli = pointbirth::cli;

int main(int argc, char** argv) {
  CLI::App app{"Point-source branching: kernels, flows, log-Laplace solver and particle simulation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  cli::Overrides overrides;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", overrides.seed, "Simulation seed");
  app.add_option("--out", overrides.out, "Output directory");
  app.add_option("--threads", overrides.threads, "Worker threads (default POINTBIRTH_THREADS or 1)");

  for (const auto& name : cli::experiment_names()) app.add_subcommand(name, "Run the " + name + " experiment");
  auto* solve = app.get_subcommand("solve");
  solve->add_option("--method", overrides.method, "picard or trotter");
  solve->add_option("--n", overrides.n, "Trotter level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfigError;
  }

  std::string text;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
  }
  const auto experiment = *cli::parse_experiment(app.get_subcommands().front()->get_name());
  return cli::run_from_text(text, experiment, overrides);
}
