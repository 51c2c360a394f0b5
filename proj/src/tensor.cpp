#include "bbed/tensor.hpp"

#include <cmath>
#include <sstream>

namespace bbed {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<TensorImpl>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<float>>(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<float>>(std::move(values));
}

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->storage->size() : 0; }

std::span<float> Tensor::data() {
  if (!impl_) return {};
  return {impl_->storage->data(), impl_->storage->size()};
}

std::span<const float> Tensor::data() const {
  if (!impl_) return {};
  return {impl_->storage->data(), impl_->storage->size()};
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::logic_error("set_requires_grad on undefined tensor");
  if (impl_->grad_fn) throw std::logic_error("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || !impl_->grad_fn; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!impl_) return {};
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->storage = impl_ ? impl_->storage : std::make_shared<std::vector<float>>();
  return from_impl(std::move(impl));
}

Tensor Tensor::clone() const { return Tensor(shape(), to_vector()); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(new_shape);
  impl->storage = impl_->storage;
  if (requires_grad()) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = "reshape";
    node->inputs = {impl_};
    node->backward = [](std::span<const float> g) {
      return std::vector<std::vector<float>>{{g.begin(), g.end()}};
    };
    impl->grad_fn = std::move(node);
  }
  return from_impl(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<float> values, std::string_view op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<std::vector<std::vector<float>>(std::span<const float>)> backward) {
  check_finite(values, op);
  Tensor out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  for (const auto* in : inputs) node->inputs.push_back(in->impl());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

void check_finite(std::span<const float> values, std::string_view op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

}  // namespace bbed
