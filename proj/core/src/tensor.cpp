#include "unrollcs/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "unrollcs/error.hpp"

namespace unrollcs {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_sequence = 0;

const detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw ContractError("use of an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }

std::span<const double> Tensor::data() const { return checked(impl_).data; }

std::span<double> Tensor::mutable_data() {
  checked(impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  if (impl_->grad_fn && !flag) throw ContractError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).grad_fn == nullptr; }

bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

std::span<double> Tensor::mutable_grad() {
  checked(impl_);
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  checked(impl_);
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& src = checked(impl_);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = src.shape;
  impl->data = src.data;
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  const auto& root = checked(impl_);
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_to_string(root.shape));
  }
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");
  if (!root.grad_fn) {
    if (root.grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }

  // Collect every recorded node reachable from the root.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    detail::TensorImpl* t = stack.back();
    stack.pop_back();
    order.push_back(t);
    for (const auto& in : t->grad_fn->inputs) {
      if (in->grad_fn && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  // Sequence numbers follow execution order, so descending order is a valid
  // reverse topological order.
  std::sort(order.begin(), order.end(), [](const detail::TensorImpl* a, const detail::TensorImpl* b) {
    return a->grad_fn->sequence > b->grad_fn->sequence;
  });

  std::unordered_map<const detail::TensorImpl*, std::vector<double>> pending;
  pending[impl_.get()] = {1.0};
  std::vector<std::span<double>> grad_inputs;
  for (detail::TensorImpl* t : order) {
    auto it = pending.find(t);
    if (it == pending.end()) continue;
    std::vector<double> grad_output = std::move(it->second);
    pending.erase(it);

    detail::Node& node = *t->grad_fn;
    grad_inputs.assign(node.inputs.size(), std::span<double>{});
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      detail::TensorImpl* in = node.inputs[i].get();
      if (!in->requires_grad) continue;
      std::vector<double>& buffer = in->grad_fn ? pending[in] : in->grad;
      if (buffer.empty()) buffer.assign(in->data.size(), 0.0);
      grad_inputs[i] = buffer;
    }
    node.backward(t->data, grad_output, grad_inputs);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_mode_enabled() { return t_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::string name,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->sequence = ++t_sequence;
    node->name = std::move(name);
    node->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

}  // namespace unrollcs
