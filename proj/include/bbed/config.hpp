#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bbed/attacks.hpp"
#include "bbed/model.hpp"
#include "bbed/robustness.hpp"

namespace bbed {

enum class DatasetKind { synthetic, cifar10, idx };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::filesystem::path path;  // cifar10: directory of binary batches
  std::filesystem::path train_images, train_labels, test_images, test_labels;  // idx
  std::size_t train_size = 2000;
  std::size_t eval_size = 500;
  std::uint64_t split_seed = 7;
  // synthetic only
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t classes = 10;
};

/// One compressed variant: distilled, pruned-weight, pruned-kernel,
/// pruned-filter, xnor or abc.
struct VariantSpec {
  std::string name;
  CompressionKind kind = CompressionKind::none;
  Regularity regularity = Regularity::weight;
  BinaryScheme scheme = BinaryScheme::none;
};

VariantSpec parse_variant(std::string_view name);

struct CompressSpec {
  std::vector<VariantSpec> variants;
  float sparsity = 0.5f;
  std::size_t abc_bases = 3;
  Arch student = Arch::small_cnn_narrow;
  DistillConfig distill;
  std::size_t finetune_epochs = 2;
  float finetune_lr = 0.01f;
};

struct AttackSweep {
  std::string name;
  AttackConfig config;
  StressKind stress = StressKind::amplitude;
  std::vector<double> values;
};

struct EvalSpec {
  std::optional<double> break_threshold;
  Taxonomy taxonomy;
  std::size_t attack_samples = 100;
  std::size_t cam_samples = 2;
  GradientRoute route = GradientRoute::ste;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1};
  bool seed_dirs = false;  // a seed list was given: one output directory per seed
  std::size_t threads = 1;
  std::filesystem::path out = "out";
  bool timings = false;
  DatasetSpec dataset;
  Arch arch = Arch::small_cnn;
  TrainConfig train;
  CompressSpec compress;
  std::vector<AttackSweep> attacks;
  EvalSpec eval;

  /// Normalized key = value text of every result-affecting setting; the config hash covers it.
  std::string canonical() const;
  /// Throws std::invalid_argument; checks referenced paths exist.
  void validate() const;
};

/// FNV-1a 64 of the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// INI text. Relative paths resolve against `base_dir`. Unknown sections or
/// keys are errors.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace bbed
