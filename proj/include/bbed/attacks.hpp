#pragma once

#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "bbed/model.hpp"
#include "bbed/tensor.hpp"

namespace bbed {

/// Score access to a classifier. `logits` never builds a graph.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t num_classes() const = 0;
  virtual Shape input_shape() const = 0;  // C, H, W
  virtual Tensor logits(const Tensor& batch) const = 0;
};

/// Adds graph-building logits so input gradients can be taken.
class DifferentiableClassifier : public Classifier {
 public:
  virtual Tensor forward_graph(const Tensor& batch) const = 0;
};

class ModelClassifier final : public DifferentiableClassifier {
 public:
  explicit ModelClassifier(const Model& model, GradientRoute route = GradientRoute::ste);
  std::size_t num_classes() const override { return model_.num_classes; }
  Shape input_shape() const override { return model_.input_shape; }
  Tensor logits(const Tensor& batch) const override;
  Tensor forward_graph(const Tensor& batch) const override;

 private:
  const Model& model_;
  GradientRoute route_;
};

/// The only channel black-box attacks have to the model: softmax scores,
/// one counted query per image.
class ScoreOracle {
 public:
  explicit ScoreOracle(const Classifier& classifier) : classifier_(classifier) {}
  /// N x classes probabilities, row-major. Counts N queries.
  std::vector<float> probabilities(const Tensor& batch);
  std::uint64_t queries() const { return queries_; }
  std::size_t num_classes() const { return classifier_.num_classes(); }

 private:
  const Classifier& classifier_;
  std::uint64_t queries_ = 0;
};

enum class AttackKind { fgsm, pgd, cw, deepfool, localsearch, genattack };

std::string_view attack_name(AttackKind k);
AttackKind parse_attack(std::string_view name);
bool is_black_box(AttackKind k);
/// fgsm, pgd, localsearch and genattack carry an L-infinity budget.
bool is_epsilon_bounded(AttackKind k);

struct CwParams {
  float c = 1.0f;
  float kappa = 0.0f;
  int steps = 100;
  float lr = 0.01f;
};

struct DeepFoolParams {
  float overshoot = 0.02f;
  int max_iter = 50;
};

struct LocalSearchParams {
  float perturbation = 0.3f;  // p
  int half_width = 2;         // d
  int candidates = 16;        // t
  int rounds = 50;            // R
};

struct GenAttackParams {
  int population = 8;          // N
  float mutation_rate = 0.1f;  // rho
  float mutation_range = 0.05f;  // delta
  int generations = 50;        // G
};

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  float epsilon = 0.03f;
  int iterations = 10;
  float step_size = 0.01f;
  bool random_start = false;
  CwParams cw;
  DeepFoolParams deepfool;
  LocalSearchParams localsearch;
  GenAttackParams genattack;
  int target = -1;  // < 0: untargeted (genattack: runner-up clean class)
  std::uint64_t seed = 0;
  float clip_min = 0.0f;
  float clip_max = 1.0f;

  /// Throws std::invalid_argument on negative budgets or counts and
  /// probabilities outside [0, 1].
  void validate() const;
  /// Upper bound on score queries (black-box kinds), 0 otherwise.
  std::uint64_t query_budget() const;
};

struct AttackResult {
  Tensor adversarial;
  int label = -1;
  int target = -1;
  int clean_class = -1;
  int adversarial_class = -1;
  bool success = false;
  std::uint64_t queries = 0;
  double linf = 0.0;
  double l2 = 0.0;
  int iterations = 0;
};

// Every attack takes one 1 x C x H x W input.

AttackResult fgsm(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config);

/// Returns the iterate x_1..x_K with the largest attack loss (x_0 when K = 0).
AttackResult pgd(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config);

/// Adam over the tanh change of variables, single c. Returns the successful
/// iterate with the smallest L2 perturbation, else the last iterate.
AttackResult cw_l2(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config);

/// Stops when the class changes, after max_iter, or when the input already
/// lies on a linearized boundary (distance <= 1e-6).
AttackResult deepfool(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config);

AttackResult localsearch(ScoreOracle& oracle, const Tensor& x, int label, const AttackConfig& config);

/// The clean input is member 0 of the first population, so generation 0
/// costs exactly N queries and every later generation N - 1.
AttackResult genattack(ScoreOracle& oracle, const Tensor& x, int label, const AttackConfig& config);

/// Dispatches on config.kind. Black-box kinds see only a ScoreOracle.
AttackResult run_attack(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config);

/// splitmix64 mix of a run seed with cell and sample indices.
std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace bbed
