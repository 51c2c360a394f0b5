#pragma once

// Toy classifiers with known geometry plus the attack fuzz and DeepFool cases
// shared by the unit tests and the acceptance binary.

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bbed/attacks.hpp"
#include "bbed/model.hpp"
#include "bbed/ops.hpp"
#include "test_util.hpp"

namespace bbed::fixtures {

/// logits = W x + b over the flattened input.
class LinearClassifier final : public DifferentiableClassifier {
 public:
  LinearClassifier(Shape input, Tensor w, Tensor b) : input_(std::move(input)), w_(std::move(w)), b_(std::move(b)) {}
  std::size_t num_classes() const override { return w_.dim(0); }
  Shape input_shape() const override { return input_; }
  Tensor logits(const Tensor& batch) const override { return forward_graph(batch.detach()); }
  Tensor forward_graph(const Tensor& batch) const override {
    return linear(batch.reshape({batch.dim(0), shape_numel(input_)}), w_, b_);
  }

 private:
  Shape input_;
  Tensor w_, b_;
};

/// Two classes, logits (f(x), 0) with f(x) = w.x + b.
inline LinearClassifier binary_linear(Shape input, const std::vector<float>& w, float b = 0.0f) {
  std::vector<float> rows(w);
  rows.resize(2 * w.size(), 0.0f);
  return LinearClassifier(std::move(input), Tensor({2, w.size()}, rows), Tensor({2}, std::vector<float>{b, 0.0f}));
}

/// Class 1 iff pixel (0,0) of channel 0 exceeds 0.5.
class PixelClassifier final : public Classifier {
 public:
  explicit PixelClassifier(Shape input) : input_(std::move(input)) {}
  std::size_t num_classes() const override { return 2; }
  Shape input_shape() const override { return input_; }
  Tensor logits(const Tensor& batch) const override {
    const std::size_t n = batch.dim(0), d = shape_numel(input_);
    Tensor z({n, 2});
    for (std::size_t i = 0; i < n; ++i) z.data()[2 * i + 1] = 10.0f * (batch.data()[i * d] - 0.5f);
    return z;
  }

 private:
  Shape input_;
};

/// Equal scores for every class.
class UniformClassifier final : public Classifier {
 public:
  UniformClassifier(Shape input, std::size_t classes) : input_(std::move(input)), classes_(classes) {}
  std::size_t num_classes() const override { return classes_; }
  Shape input_shape() const override { return input_; }
  Tensor logits(const Tensor& batch) const override { return Tensor({batch.dim(0), classes_}); }

 private:
  Shape input_;
  std::size_t classes_;
};

/// One scalar input; class 1 iff x > 0.7.
inline LinearClassifier threshold_classifier() {
  return LinearClassifier({1, 1, 1}, Tensor({2, 1}, std::vector<float>{0.0f, 50.0f}),
                          Tensor({2}, std::vector<float>{0.0f, -35.0f}));
}

/// Random linear binary classifier; checks one DeepFool iteration whose step
/// length equals |f(x)| / ||w|| within 1e-6. Returns an empty string on success.
inline std::string run_deepfool_linear_case(std::mt19937_64& rng) {
  const std::size_t d = rand_dim(rng, 2, 16);
  auto w = random_tensor({d}, rng, -2.0f, 2.0f).to_vector();
  const float b = std::uniform_real_distribution<float>(-0.5f, 0.5f)(rng);
  auto clf = binary_linear({1, 1, d}, w, b);
  Tensor x = random_tensor({1, 1, 1, d}, rng, 0.0f, 1.0f);
  double f = b, norm2 = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    f += static_cast<double>(w[i]) * x.data()[i];
    norm2 += static_cast<double>(w[i]) * w[i];
  }
  const double expected = std::abs(f) / std::sqrt(norm2);
  if (expected < 1e-3) return "";  // degenerate: x already on the boundary
  AttackConfig cfg;
  cfg.kind = AttackKind::deepfool;
  cfg.deepfool.overshoot = 0.0f;
  cfg.clip_min = -100.0f;
  cfg.clip_max = 100.0f;
  const int label = f >= 0.0 ? 0 : 1;
  auto r = deepfool(clf, x, label, cfg);
  if (r.iterations != 1) return "iterations " + std::to_string(r.iterations);
  if (std::abs(r.l2 - expected) > 1e-6) {
    return "step " + std::to_string(r.l2) + " vs " + std::to_string(expected);
  }
  return "";
}

inline bool same_result(const AttackResult& a, const AttackResult& b) {
  if (a.adversarial.shape() != b.adversarial.shape()) return false;
  auto x = a.adversarial.data(), y = b.adversarial.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(x[i]) != std::bit_cast<std::uint32_t>(y[i])) return false;
  }
  return a.label == b.label && a.target == b.target && a.clean_class == b.clean_class &&
         a.adversarial_class == b.adversarial_class && a.success == b.success && a.queries == b.queries &&
         a.linf == b.linf && a.l2 == b.l2 && a.iterations == b.iterations;
}

inline AttackConfig random_attack_config(std::mt19937_64& rng) {
  AttackConfig cfg;
  cfg.kind = static_cast<AttackKind>(std::uniform_int_distribution<int>(0, 5)(rng));
  auto unit = [&] { return std::uniform_real_distribution<float>(0.0f, 1.0f)(rng); };
  auto count = [&](int hi) { return std::uniform_int_distribution<int>(0, hi)(rng); };
  cfg.epsilon = std::bernoulli_distribution(0.1)(rng) ? 0.0f : 0.3f * unit();
  cfg.iterations = count(6);
  cfg.step_size = 0.1f * unit();
  cfg.random_start = std::bernoulli_distribution(0.5)(rng);
  cfg.cw = {10.0f * unit(), unit(), count(8), 0.1f * unit()};
  cfg.deepfool = {0.1f * unit(), count(5)};
  cfg.localsearch = {unit(), count(3), count(8), count(5)};
  cfg.genattack = {1 + count(7), unit(), 0.2f * unit(), count(6)};
  cfg.seed = rng();
  return cfg;
}

/// One soundness fuzz run: epsilon budget, [0, 1] range, exact query count
/// within the declared budget, and bit-identical seed replay.
inline std::string run_attack_fuzz_case(std::mt19937_64& rng, const std::vector<const Model*>& models) {
  const Model& model = *models[std::uniform_int_distribution<std::size_t>(0, models.size() - 1)(rng)];
  const auto route = std::bernoulli_distribution(0.5)(rng) ? GradientRoute::ste : GradientRoute::latent;
  ModelClassifier clf(model, route);
  Shape shape{1};
  shape.insert(shape.end(), model.input_shape.begin(), model.input_shape.end());
  Tensor x = random_tensor(shape, rng, 0.0f, 1.0f);
  const int label = std::uniform_int_distribution<int>(0, static_cast<int>(model.num_classes) - 1)(rng);
  AttackConfig cfg = random_attack_config(rng);

  auto run = [&](std::uint64_t& counted) {
    ScoreOracle oracle(clf);
    AttackResult r;
    switch (cfg.kind) {
      case AttackKind::localsearch: r = localsearch(oracle, x, label, cfg); break;
      case AttackKind::genattack: r = genattack(oracle, x, label, cfg); break;
      default: r = run_attack(clf, x, label, cfg);
    }
    counted = oracle.queries();
    return r;
  };
  std::uint64_t counted = 0, counted2 = 0;
  const AttackResult r = run(counted);
  const std::string tag = std::string(attack_name(cfg.kind)) + ": ";
  auto adv = r.adversarial.data();
  auto x0 = x.data();
  if (adv.size() != x0.size()) return tag + "shape changed";
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (!(adv[i] >= 0.0f && adv[i] <= 1.0f)) return tag + "left [0, 1]";
    if (is_epsilon_bounded(cfg.kind) && (adv[i] < x0[i] - cfg.epsilon || adv[i] > x0[i] + cfg.epsilon)) {
      return tag + "exceeded epsilon";
    }
  }
  if (is_black_box(cfg.kind)) {
    if (r.queries != counted) return tag + "reported queries differ from the counter";
    if (r.queries > cfg.query_budget()) return tag + "query budget exceeded";
  } else if (r.queries != 0) {
    return tag + "white-box attack reported queries";
  }
  if (!same_result(r, run(counted2)) || counted != counted2) return tag + "seed replay differs";
  return "";
}

/// fgsm(eps) against pgd(1 iteration, step eps, no random start), bitwise.
inline bool run_fgsm_pgd_case(std::mt19937_64& rng, const Model& model) {
  ModelClassifier clf(model);
  Shape shape{1};
  shape.insert(shape.end(), model.input_shape.begin(), model.input_shape.end());
  Tensor x = random_tensor(shape, rng, 0.0f, 1.0f);
  const int label = std::uniform_int_distribution<int>(0, static_cast<int>(model.num_classes) - 1)(rng);
  AttackConfig cfg;
  cfg.epsilon = std::uniform_real_distribution<float>(0.0f, 0.3f)(rng);
  cfg.target = std::bernoulli_distribution(0.2)(rng) ? (label + 1) % static_cast<int>(model.num_classes) : -1;
  auto a = fgsm(clf, x, label, cfg);
  cfg.kind = AttackKind::pgd;
  cfg.iterations = 1;
  cfg.step_size = cfg.epsilon;
  cfg.random_start = false;
  auto b = pgd(clf, x, label, cfg);
  return same_result(a, b);
}

}  // namespace bbed::fixtures
