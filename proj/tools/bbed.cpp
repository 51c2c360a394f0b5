// bbed: train, compress, attack and evaluate compressed CNNs from one config file.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "bbed/config.hpp"
#include "bbed/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string model;
  bool timings = false;
};

void add_flags(CLI::App* cmd, Flags& f, bool takes_model) {
  cmd->add_option("--config", f.config, "experiment config (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory (overrides [run] out)");
  cmd->add_option("--seed", f.seed, "run a single seed (overrides [run] seed/seeds)");
  cmd->add_option("--threads", f.threads, "worker-pool width (default 1)")->check(CLI::PositiveNumber);
  if (takes_model) cmd->add_option("--model", f.model, "checkpoint to use instead of the output directory's");
  cmd->add_flag("--timings", f.timings, "also write wall-clock seconds per cell to timings.csv");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robustness benchmark for compressed CNNs under adversarial attack"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  Flags flags;
  auto* train = app.add_subcommand("train", "train the uncompressed model");
  auto* compress = app.add_subcommand("compress", "build the distilled, pruned and binarized variants");
  auto* attack = app.add_subcommand("attack", "run every attack sweep against every model");
  auto* evaluate = app.add_subcommand("evaluate", "curves, box statistics, PCA and CAM from the attack results");
  auto* report = app.add_subcommand("report", "plots and summary tables");
  auto* all = app.add_subcommand("all", "train, compress, attack, evaluate and report");
  add_flags(train, flags, false);
  add_flags(compress, flags, true);
  add_flags(attack, flags, true);
  add_flags(evaluate, flags, false);
  add_flags(report, flags, false);
  add_flags(all, flags, false);
  CLI11_PARSE(app, argc, argv);

  bbed::ExperimentConfig config;
  try {
    config = bbed::load_config(flags.config);
    if (flags.seed) {
      config.seeds = {*flags.seed};
      config.seed_dirs = false;
    }
    if (flags.threads) config.threads = *flags.threads;
    if (flags.timings) config.timings = true;
    if (!flags.out.empty()) config.out = flags.out;
    config.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  const std::optional<fs::path> model = flags.model.empty() ? std::nullopt : std::optional<fs::path>(flags.model);
  std::size_t failures = 0;
  try {
    if (all->parsed()) {
      failures = bbed::run_experiment(config, config.out);
    } else {
      for (auto seed : config.seeds) {
        const auto dir = bbed::seed_directory(config, config.out, seed);
        if (train->parsed()) bbed::train_stage(config, seed, dir);
        if (compress->parsed()) bbed::compress_stage(config, seed, dir, model);
        if (attack->parsed()) failures += bbed::attack_stage(config, seed, dir, model);
        if (evaluate->parsed()) failures += bbed::evaluate_stage(config, seed, dir).failures.size();
        if (report->parsed()) bbed::report_stage(config, dir);
      }
      if (report->parsed() && config.seed_dirs) bbed::write_aggregate(config, config.out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  if (failures) {
    std::fprintf(stderr, "%zu failed cell(s); see cells.csv and record.json\n", failures);
    return 1;
  }
  return 0;
}
