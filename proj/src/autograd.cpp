#include "bbed/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace bbed {

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root;
  if (!root.defined()) return tape;

  // Iterative post-order DFS yields inputs before the ops that consume them.
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& node = impl->grad_fn;
    if (node && next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->grad_fn && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      continue;
    }
    if (node) tape.order_.push_back(impl);
    stack.pop_back();
  }
  for (const auto& impl : tape.order_) {
    TapeEntry e;
    e.op = impl->grad_fn->op;
    e.output = impl.get();
    for (const auto& in : impl->grad_fn->inputs) e.inputs.push_back(in.get());
    tape.entries_.push_back(std::move(e));
  }
  return tape;
}

void Tape::backward(std::span<const float> seed) const {
  if (!root_.defined()) throw std::logic_error("backward on undefined tensor");
  if (seed.size() != root_.numel()) {
    throw ShapeError("backward seed has " + std::to_string(seed.size()) + " values, root has " +
                     std::to_string(root_.numel()));
  }
  auto accumulate = [](std::vector<float>& dst, std::span<const float> src) {
    if (dst.empty()) {
      dst.assign(src.begin(), src.end());
    } else {
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
  };

  if (!root_.impl()->grad_fn) {
    if (root_.requires_grad()) accumulate(root_.impl()->grad, seed);
    return;
  }

  std::unordered_map<const TensorImpl*, std::vector<float>> pending;
  pending[root_.impl().get()].assign(seed.begin(), seed.end());
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const auto& impl = *it;
    auto found = pending.find(impl.get());
    if (found == pending.end()) continue;
    std::vector<float> gout = std::move(found->second);
    pending.erase(found);
    const auto& node = *impl->grad_fn;
    auto gins = node.backward(gout);
    for (std::size_t i = 0; i < node.inputs.size() && i < gins.size(); ++i) {
      const auto& in = node.inputs[i];
      if (gins[i].empty() || !in->requires_grad) continue;
      if (gins[i].size() != in->storage->size()) {
        throw std::logic_error(std::string(node.op) + ": backward produced wrong gradient size");
      }
      if (in->grad_fn) {
        accumulate(pending[in.get()], gins[i]);
      } else {
        accumulate(in->grad, gins[i]);
      }
    }
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  const float one = 1.0f;
  backward(loss, std::span<const float>(&one, 1));
}

void backward(const Tensor& root, std::span<const float> seed) { Tape::record(root).backward(seed); }

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h) {
  if (!(h > 0.0f)) throw std::invalid_argument("grad_check step must be positive");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.numel() != 1) throw ShapeError("grad_check requires a scalar function");
  std::vector<float> analytic(probe.numel(), 0.0f);
  if (y.requires_grad()) {
    backward(y);
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  }

  double worst = 0.0;
  Tensor shifted = x.clone();
  auto values = shifted.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float orig = values[i];
    const float hi = orig + h;
    const float lo = orig - h;
    values[i] = hi;
    const double up = f(shifted).item();
    values[i] = lo;
    const double down = f(shifted).item();
    values[i] = orig;
    // Divide by the step actually taken after float rounding of orig +- h.
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double a = analytic[i];
    const double diff = std::abs(a - numeric);
    if (diff == 0.0) continue;
    const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

}  // namespace bbed
