#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "bbed/tensor.hpp"

namespace bbed {

struct TapeEntry {
  std::string_view op;
  const TensorImpl* output = nullptr;
  std::vector<const TensorImpl*> inputs;
};

/// Topologically ordered record of the operations that produced `root`.
/// Every entry's inputs appear as outputs of earlier entries or are leaves.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<TapeEntry>& entries() const { return entries_; }

  /// Runs the recorded operations backwards once each, seeding d(root) with
  /// `seed`. Leaf gradients accumulate into TensorImpl::grad.
  void backward(std::span<const float> seed) const;

 private:
  Tensor root_;
  std::vector<std::shared_ptr<TensorImpl>> order_;
  std::vector<TapeEntry> entries_;
};

/// Populates grads of every requires_grad leaf reachable from a scalar loss.
void backward(const Tensor& loss);

/// Vector-Jacobian product: backpropagates `seed` (same shape as root).
void backward(const Tensor& root, std::span<const float> seed);

/// Worst-case relative error between tape gradients of the scalar function
/// `f` at `x` and central finite differences with step `h`. A coordinate's
/// error is |a - n| / max(|a|, |n|, 1); both-zero coordinates score 0.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h);

}  // namespace bbed
