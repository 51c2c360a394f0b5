#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bbed {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when a forward op produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on dimension/shape contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl;

/// One recorded operation. `backward` maps the gradient of the op output to
/// one gradient buffer per input (empty when that input needs no gradient).
struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<std::vector<std::vector<float>>(std::span<const float>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<float>> storage;
  std::vector<float> grad;  // empty until a backward pass reaches this leaf
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// Dense row-major float32 tensor. Copies are shallow handles: two Tensor
/// objects copied from each other alias the same storage and graph node.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  bool defined() const { return static_cast<bool>(impl_); }

  std::span<float> data();
  std::span<const float> data() const;
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Shares storage, drops graph history and requires_grad.
  Tensor detach() const;
  /// Deep copy of the values, no graph history.
  Tensor clone() const;
  /// Same storage viewed with a new shape of equal element count. Records a
  /// graph node when the source participates in differentiation.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Creates an op output, attaching a graph node when any input requires grad.
Tensor make_result(Shape shape, std::vector<float> values, std::string_view op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<std::vector<std::vector<float>>(std::span<const float>)> backward);

/// Throws NumericError if any element is NaN or Inf.
void check_finite(std::span<const float> values, std::string_view op);

}  // namespace bbed
