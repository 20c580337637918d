#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace unrollcs {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Persistent gradient of a leaf. Intermediate gradients live only for the
  // duration of one backward() call.
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

// Backward closure of one recorded operation. `output` holds the forward
// result. `grad_inputs[i]` is empty when input i does not need a gradient;
// otherwise it is the buffer to accumulate into.
using BackwardFn = std::function<void(std::span<const double> output,
                                      std::span<const double> grad_output,
                                      std::vector<std::span<double>>& grad_inputs)>;

struct Node {
  std::uint64_t sequence = 0;
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

}  // namespace detail

// Dense N-d array of doubles, NCHW for image data. A Tensor is a handle: copies
// share the same storage, which is how parameters are shared between stages.
// Operations always allocate fresh storage for their result.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view for leaves (parameters, inputs). Writing into a tensor that
  // is already part of a recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, fresh storage, no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate (+=).
  void backward() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

// Builds an op result. Records a node only when grad mode is on and some
// input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::string name,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace unrollcs
