#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fvt/common.hpp"

namespace fvt {
inline namespace FVT_NS {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// One recorded operation in the autodiff graph. `backward` reads the output
// gradient and accumulates into the gradients of `inputs`.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  // Stays empty until the first accumulation; never allocated when
  // requires_grad is false.
  std::vector<real> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<real>& grad_buffer();
};

// Dense row-major tensor with reference semantics: copies share storage and
// graph linkage, like a framework tensor handle. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> data, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);
  static Tensor eye(std::size_t n, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const real> data() const;
  // Direct write access for initializers and optimizers. Must not be used on
  // tensors that are inputs of a live graph awaiting backward.
  std::span<real> mutable_data();
  real item() const;
  real operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  // Only valid on leaves (tensors not produced by a recorded op).
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const real> grad() const;
  void zero_grad();

  // Deep copy of data as a new leaf; requires_grad is preserved.
  Tensor clone() const;
  // Shares nothing, carries no graph, never requires grad.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  const TensorImpl& checked() const;
  TensorImpl& checked();
  std::shared_ptr<TensorImpl> impl_;
};

// Graph recording is enabled by default and is thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Wraps freshly computed output values in a Tensor, recording a graph node
// when grad mode is on and any input requires grad. Kernels outside ops.cpp
// use this to register custom differentiable operations.
Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);

// Reverse-mode sweep from a scalar. Gradients accumulate into every
// reachable tensor with requires_grad in reverse topological order.
// Intermediate gradients are reset at the start of each sweep, so repeated
// calls after zero_grad() on the leaves reproduce the same result.
void backward(const Tensor& loss);

}  // namespace FVT_NS
}  // namespace fvt
