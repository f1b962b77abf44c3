#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedopt/cli.hpp"
#include "fedopt/selftest.hpp"

namespace {

std::size_t threads_from_env() {
  const char* v = std::getenv("FEDOPT_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  try {
    return static_cast<std::size_t>(std::stoul(v));
  } catch (const std::exception&) {
    std::cerr << "warning: ignoring invalid FEDOPT_THREADS='" << v << "'\n";
    return 0;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic federated optimization simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto* run = app.add_subcommand("run", "Run an experiment (or sweep) and write metrics.csv + manifest.json");
  run->add_option("config", config_path, "Flat JSON config file")->required();
  run->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> csvs;
  double target = 0.0;
  auto* compare = app.add_subcommand("compare", "Compare runs by rounds needed to reach a test accuracy");
  compare->add_option("csv", csvs, "metrics.csv files; the first is the reference")->required();
  compare->add_option("--target", target, "Target test accuracy in (0, 1]")->required();

  auto* selftest = app.add_subcommand("selftest", "Run a fast subset of the invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : fedopt::kExitConfig;
  }

  if (*run) {
    fedopt::RunOptions opts;
    opts.threads = threads_from_env();
    return fedopt::run_command(config_path, out_dir, opts, std::cout, std::cerr);
  }
  if (*compare) return fedopt::compare_command(csvs, target, std::cout, std::cerr);
  if (*selftest) return fedopt::run_selftest(std::cout) ? 0 : 1;
  return 0;
}
