#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "xferlab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"xferlab - synthetic transfer-learning experiments for shallow "
               "ReLU networks"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed_override = 0;
  bool have_seed_override = false;
  bool single_thread = false;

  auto* run = app.add_subcommand("run", "execute an experiment config");
  run->add_option("config", config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--seed-override", seed_override,
                  "replace the config seed list with this single seed")
      ->each([&](const std::string&) { have_seed_override = true; });
  run->add_flag("--single-thread", single_thread,
                "force sequential execution (runs are sequential regardless; "
                "kept for config provenance)");
  run->add_option("--out", out_dir, "output directory (overrides config)");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "summarize a finished run");
  report->add_option("run_dir", run_dir, "run directory")->required();

  std::string validate_path;
  auto* validate =
      app.add_subcommand("validate-config", "schema-check a config");
  validate->add_option("config", validate_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    xferlab::cli::RunOverrides overrides;
    if (have_seed_override) overrides.seed_override = seed_override;
    if (!out_dir.empty()) overrides.out_dir = out_dir;
    overrides.single_thread = single_thread;
    return xferlab::cli::run_experiment(config_path, overrides);
  }
  if (report->parsed()) {
    return xferlab::cli::report_run(run_dir, std::cout);
  }
  if (validate->parsed()) {
    const auto errors = xferlab::cli::validate_config_file(validate_path);
    for (const auto& err : errors) std::cerr << "config error: " << err << "\n";
    if (errors.empty()) std::cout << "config OK\n";
    return errors.empty() ? 0 : 1;
  }
  return 1;
}
