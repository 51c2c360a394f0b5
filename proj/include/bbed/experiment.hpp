#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bbed/config.hpp"
#include "bbed/dataset.hpp"
#include "bbed/model.hpp"
#include "bbed/robustness.hpp"

namespace bbed {

struct DataSplit {
  Dataset train, eval;
};

/// Seeded train/eval selection; throws FormatError for malformed files.
DataSplit load_data(const DatasetSpec& spec);

// Output directory layout of one seed:
//   models/<name>.bbed, train_log.csv          train, compress
//   models.csv, cells.csv, attack_results.csv  attack
//   curves.csv, curve_summary.csv, observations.csv, box.csv,
//   pca_loadings.csv, pca_scores.csv, cam/, cam_quartiles.csv, record.json   evaluate
//   plots/*.svg, summary.csv, summary.md       report
//   timings.csv                                 attack, only with timings on

struct ModelRow {
  std::string name;
  std::string path;  // checkpoint, relative to the seed directory when inside it
  Arch arch = Arch::none;
  CompressionKind compression = CompressionKind::none;
  double clean_accuracy = 0.0;
  CompressionStats stats;
};

struct CellRow {
  std::string model, attack;
  StressKind kind = StressKind::amplitude;
  double stress = 0.0;
  std::size_t stress_index = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double clean_accuracy = 0.0;
  std::size_t samples = 0, attacked = 0, successes = 0;
  double mean_queries = 0.0, mean_linf = 0.0, mean_l2 = 0.0;
  std::string status = "ok";  // or the error message of a failed cell
  double seconds = 0.0;
};

struct NamedCurve {
  std::string model, attack;
  StressStrainCurve curve;
};

struct RunRecord {
  std::string config_hash;
  std::string canonical_config;
  std::uint64_t seed = 0;
  std::vector<ModelRow> models;
  std::vector<CellRow> cells;
  std::vector<NamedCurve> curves;
  std::vector<std::string> failures;
  std::vector<std::string> pca_columns, pca_dropped;
  std::optional<PcaResult> pca;
};

/// Seed of cell (model, attack, stress index); sample i then uses derive_seed(cell_seed, i).
std::uint64_t cell_seed(std::uint64_t run_seed, const std::string& model, const std::string& attack,
                        std::size_t stress_index);

/// Directory for one seed: `out` itself, or out/seed_<s> when the config lists seeds.
std::filesystem::path seed_directory(const ExperimentConfig& config, const std::filesystem::path& out,
                                     std::uint64_t seed);

Model train_stage(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& dir);

/// Teacher from `teacher_path`, else models/vanilla.bbed.
void compress_stage(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& dir,
                    const std::optional<std::filesystem::path>& teacher_path = std::nullopt);

/// Attacks vanilla plus every configured variant, or only `model_path`.
/// Failed cells are recorded, never thrown; returns the number of failures.
std::size_t attack_stage(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& dir,
                         const std::optional<std::filesystem::path>& model_path = std::nullopt);

RunRecord evaluate_stage(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& dir);

void report_stage(const ExperimentConfig& config, const std::filesystem::path& dir);

/// Per-seed accuracies summarized as mean and box statistics over seeds.
void write_aggregate(const ExperimentConfig& config, const std::filesystem::path& out);

/// train, compress, attack, evaluate, report for every seed. Returns the failed cell count.
std::size_t run_experiment(const ExperimentConfig& config, const std::filesystem::path& out);

}  // namespace bbed
