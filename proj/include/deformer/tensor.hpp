#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

/// Record of the operation that produced a non-leaf tensor.
template <typename T>
struct GradNode {
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  // Receives the output gradient and accumulates into the inputs' grads.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;
};

/// Shared handle to a contiguous row-major buffer that can take part in
/// reverse-mode differentiation. Copies alias the same storage; use clone()
/// for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  /// Only leaves may toggle the flag; turning it off drops any grad buffer.
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool is_leaf() const { return impl_->node == nullptr; }
  const GradNode<T>* node() const { return impl_->node.get(); }

  /// Same values, no history, no grad.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate across calls.
  void backward() const;

  /// Grad buffer to accumulate into during backward, or nullptr when this
  /// tensor does not take gradients.
  T* grad_sink() const;

  TensorImpl<T>* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Whether newly created op results record history (per thread).
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

/// Builds an op result; attaches `backward` only when grad mode is on and
/// some input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward);

}  // namespace deformer
