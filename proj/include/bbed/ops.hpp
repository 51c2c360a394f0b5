#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bbed/tensor.hpp"

namespace bbed {

// Differentiable operations. Every op records itself on the graph when any
// operand requires grad, and rejects non-finite outputs.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// ReLU with subgradient 0 at 0.
Tensor relu(const Tensor& x);

/// sign(x) in {-1, +1} with sign(0) = +1. Backward is the straight-through
/// estimator: upstream gradient passes where |x| <= 1, zero elsewhere.
Tensor sign_ste(const Tensor& x);

/// Input NCHW, weight OIHW, no bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding);

enum class BatchNormMode { statistics, minibatch };

/// Per-channel batch normalization over N(,H,W) for NC or NCHW input.
/// In minibatch mode the running statistics are blended with the batch
/// statistics using `momentum` when `update_running` is set.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, BatchNormMode mode, float epsilon = 1e-5f, float momentum = 0.1f,
                 bool update_running = true);

/// Multiplies channel c of an NCHW tensor by scales[c]. Differentiable in x only.
Tensor scale_channels(const Tensor& x, std::span<const float> scales);

Tensor max_pool2d(const Tensor& input, int kernel, int stride);

/// NCHW -> NC mean over spatial positions.
Tensor global_average_pool(const Tensor& input);

/// x: N x K, weight: O x K, bias: O (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean over the batch of -sum_j p_j log softmax(logits)_j for soft targets p.
Tensor soft_cross_entropy(const Tensor& logits, std::span<const float> target_probs);

/// Row-wise softmax of an N x C float buffer (not differentiable).
std::vector<float> softmax_rows(std::span<const float> logits, std::size_t classes, float temperature = 1.0f);

/// Momentum SGD with optional L2 weight decay over a fixed parameter list.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, float lr, float momentum = 0.9f, float weight_decay = 0.0f);

  void step();
  void zero_grad();
  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  float lr_;
  float momentum_;
  float weight_decay_;
};

/// One SGD update in place (functional form of Sgd::step for a single call).
void sgd_step(std::span<Tensor> params, std::span<std::vector<float>> velocity, float lr, float momentum);

}  // namespace bbed
