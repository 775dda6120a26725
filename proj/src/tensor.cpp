#include "fvt/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <malloc.h>

#include "fvt/errors.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

// Activation buffers are allocated and freed every step. Keeping them on the
// heap instead of fresh mmap regions avoids page-fault zeroing on each one.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();

thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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

std::vector<real>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), real{0});
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), real{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<real>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<real> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::eye(std::size_t n, bool requires_grad) {
  std::vector<real> d(n * n, real{0});
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = real{1};
  return from({n, n}, std::move(d), requires_grad);
}

const TensorImpl& Tensor::checked() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

TensorImpl& Tensor::checked() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const real> Tensor::data() const { return checked().data; }

std::span<real> Tensor::mutable_data() { return checked().data; }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  auto& impl = checked();
  impl.requires_grad = value;
  if (!value) {
    impl.grad.clear();
    impl.grad.shrink_to_fit();
  }
}

bool Tensor::is_leaf() const { return checked().node == nullptr; }

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const real> Tensor::grad() const { return checked().grad; }

void Tensor::zero_grad() {
  auto& g = checked().grad;
  std::fill(g.begin(), g.end(), real{0});
}

Tensor Tensor::clone() const {
  return from(shape(), checked().data, requires_grad());
}

Tensor Tensor::detach() const { return from(shape(), checked().data, false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward_fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward_fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that is not connected to any trainable tensor");
  }

  // Iterative post-order DFS; `order` ends up inputs-before-outputs.
  std::vector<TensorImpl*> order;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const std::size_t n_inputs = impl->node ? impl->node->inputs.size() : 0;
    if (next < n_inputs) {
      TensorImpl* child = impl->node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  for (TensorImpl* impl : order) {
    if (impl->node) std::fill(impl->grad.begin(), impl->grad.end(), real{0});
  }
  loss.impl()->grad_buffer()[0] += real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node || impl->grad.empty()) continue;
    impl->node->backward(*impl);
  }
}

}  // namespace FVT_NS
}  // namespace fvt
