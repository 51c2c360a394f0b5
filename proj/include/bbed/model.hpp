#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "bbed/bitpack.hpp"
#include "bbed/dataset.hpp"
#include "bbed/ops.hpp"
#include "bbed/tensor.hpp"

namespace bbed {

enum class Arch : std::uint8_t { none = 0, tiny_cnn = 1, small_cnn = 2, small_cnn_narrow = 3, resnet_mini = 4 };

std::string_view arch_name(Arch a);
Arch parse_arch(std::string_view name);
/// Architectures of one family share input/output shape and are comparable.
std::string_view arch_family(Arch a);

enum class ActKind : std::uint8_t { relu = 0, identity = 1 };
enum class BinaryScheme : std::uint8_t { none = 0, xnor = 1, abc = 2 };
enum class Regularity : std::uint8_t { weight = 0, kernel = 1, filter = 2 };
enum class CompressionKind : std::uint8_t { none = 0, distilled = 1, pruned = 2, binarized = 3 };

std::string_view regularity_name(Regularity r);
Regularity parse_regularity(std::string_view name);
std::string_view compression_name(CompressionKind k);

/// ABC shift selection: greedy nested choice from a grid, or evenly spaced.
enum class ShiftRule : std::uint8_t { greedy = 0, even = 1 };

/// How white-box gradients cross binarized layers.
enum class GradientRoute { ste, latent };

struct ConvLayer {
  Tensor weight;  // OIHW; the latent full-precision weights for binarized layers
  int stride = 1;
  int padding = 0;
  Tensor mask;  // same shape as weight when pruned, else undefined
  bool binarize_input = false;
  BinaryScheme scheme = BinaryScheme::none;
  std::size_t num_bases = 0;
  ShiftRule shifts = ShiftRule::greedy;
  // Frozen binarization: num_bases packed sign tensors over O*I*KH*KW and
  // num_bases x O scales. Empty while the layer is being fine-tuned.
  std::vector<PackedBits> bases;
  std::vector<float> alpha;

  bool frozen() const { return !bases.empty(); }
  /// sum_m alpha[m,o] * B_m as a float OIHW tensor.
  Tensor effective_weight() const;
};

struct BatchNormLayer {
  Tensor gamma, beta, running_mean, running_var;
  float epsilon = 1e-5f;
  float momentum = 0.1f;
};

struct ActLayer {
  ActKind kind = ActKind::relu;
};

struct MaxPoolLayer {
  int kernel = 2;
  int stride = 2;
};

struct SkipSaveLayer {};
struct SkipAddLayer {};
struct GapLayer {};

struct LinearLayer {
  Tensor weight, bias;
};

using Layer = std::variant<ConvLayer, BatchNormLayer, ActLayer, MaxPoolLayer, SkipSaveLayer, SkipAddLayer, GapLayer,
                           LinearLayer>;

struct CompressionInfo {
  CompressionKind kind = CompressionKind::none;
  BinaryScheme scheme = BinaryScheme::none;
  std::size_t num_bases = 0;
  Regularity regularity = Regularity::weight;
  float sparsity = 0.0f;
  float temperature = 0.0f;
  float mix = 0.0f;
  Arch teacher = Arch::none;
};

struct Model {
  Arch arch = Arch::none;
  Shape input_shape;  // C, H, W
  std::size_t num_classes = 0;
  std::vector<Layer> layers;
  CompressionInfo compression;

  /// Deep copy: no tensor storage is shared with the source.
  Model clone() const;
  /// Trainable tensors in layer order.
  std::vector<Tensor> parameters() const;
  const LinearLayer& final_linear() const;
  std::vector<std::size_t> conv_indices() const;
};

/// He-normal conv/linear init, BN gamma 1 beta 0, from `seed`.
Model make_model(Arch arch, std::size_t num_classes, std::uint64_t seed);

struct ForwardOptions {
  BatchNormMode bn_mode = BatchNormMode::statistics;
  bool param_grads = false;
  GradientRoute route = GradientRoute::ste;
  /// Run frozen binarized layers with binary inputs through the packed
  /// XNOR-popcount kernels when no gradient is needed. Bit-identical to the
  /// float path.
  bool packed = true;
};

struct ForwardOutput {
  Tensor logits;
  Tensor features;  // input of the global-average-pool layer
};

/// Running statistics are never modified.
ForwardOutput forward(const Model& model, const Tensor& x, const ForwardOptions& options = {});

/// Training forward: minibatch batchnorm updating running statistics, parameter gradients on.
Tensor forward_train(Model& model, const Tensor& x);

std::vector<int> predict(const Model& model, const Tensor& batch);
double accuracy(const Model& model, const Dataset& data, std::size_t batch_size = 100);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  bool augment = true;  // random 4-pixel-padded crop plus horizontal flip
  std::uint64_t seed = 1;
};

struct TrainReport {
  std::vector<float> batch_losses;
  std::vector<float> epoch_losses;
};

/// Extra loss hook: receives logits and the augmented input batch.
using LossFn = std::function<Tensor(const Tensor& logits, std::span<const int> labels, const Tensor& inputs)>;

/// Momentum SGD with cosine learning-rate decay. Prune masks are re-applied
/// after every step; binarized layers train their latent weights through the
/// straight-through estimator and are re-frozen at the end.
TrainReport train(Model& model, const Dataset& data, const TrainConfig& config, const LossFn& loss = {});

struct DistillConfig {
  float temperature = 4.0f;
  float mix = 0.5f;  // weight of the hard-label term
};

/// alpha*CE(student, labels) + (1-alpha)*T^2*KL(softmax(teacher/T) || softmax(student/T)).
Tensor distillation_loss(const Tensor& student_logits, std::span<const int> labels, std::span<const float> teacher_logits,
                         const DistillConfig& config);

Model distill(const Model& teacher, Arch student_arch, const DistillConfig& config, const Dataset& data,
              const TrainConfig& train_config, TrainReport* report = nullptr);

/// Zeroes the lowest-magnitude units of the selected conv layers (all when
/// empty) and installs persistent masks. Units: scalars by |w|, kernels and
/// filters by L1 norm. Per layer k = round(sparsity * units), at most units-1.
Model prune(const Model& model, Regularity regularity, float sparsity, std::span<const std::size_t> layers = {});

struct BinarizeOptions {
  bool keep_first_full_precision = true;
  bool binarize_activations = true;
  ShiftRule shifts = ShiftRule::greedy;
};

struct BinaryDecomposition {
  std::vector<std::vector<float>> bases;  // each +-1 over all weights
  std::vector<float> alpha;               // num_bases x filters
};

/// B = sign(W), alpha per filter = mean |W| over that filter.
BinaryDecomposition decompose_xnor(std::span<const float> w, std::size_t filters);

/// W ~ sum_i alpha_i B_i with B_i = sign(W - mean + u_i std) and least-squares
/// alpha. Greedy rule: u_1 = 0, then each further shift is the grid point
/// (33 points in [-1, 1]) that most reduces the residual. Even rule: u_i
/// evenly spaced in [-1, 1]. Scales are shared across filters.
BinaryDecomposition decompose_abc(std::span<const float> w, std::size_t filters, std::size_t num_bases,
                                  ShiftRule rule = ShiftRule::greedy);

/// Least-squares coefficients of y on the columns; ridge fallback when singular.
std::vector<double> least_squares(const std::vector<std::vector<float>>& columns, std::span<const float> y);

Model binarize_xnor(const Model& model, const BinarizeOptions& options = {});
Model binarize_abc(const Model& model, std::size_t num_bases, const BinarizeOptions& options = {});

/// Recomputes bases and scales of every binarized conv from its latent weights.
void freeze_binarization(Model& model);

struct CompressionStats {
  double compression_ratio = 1.0;
  double ncc = 1.0;
  double parameter_bits = 0.0;
  double baseline_parameter_bits = 0.0;
  double macs = 0.0;
  double baseline_macs = 0.0;
};

struct CostOptions {
  double binary_mac_weight = 1.0 / static_cast<double>(kWordBits);
};

double parameter_bits(const Model& model);
double mac_count(const Model& model, const CostOptions& options = {});
CompressionStats compression_stats(const Model& model, const Model& baseline, const CostOptions& options = {});

}  // namespace bbed
