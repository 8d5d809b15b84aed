#include "deformer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "deformer/errors.hpp"

namespace deformer {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorImpl<T>>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaf tensors can be toggled");
  impl_->requires_grad = on;
  if (!on) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor<T>(impl_->shape, impl_->data);
}

template <typename T>
T* Tensor<T>::grad_sink() const {
  if (!impl_->requires_grad) return nullptr;
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T{0});
  return impl_->grad.data();
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: output must be a scalar, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) {
    throw ContractError("backward: output does not depend on any tensor requiring grad");
  }

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl<T>* child = node->node->inputs[next++].impl();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  // Interior grads are scratch for this sweep only; leaves accumulate.
  for (auto* t : order) {
    if (t->node) {
      t->grad.assign(t->data.size(), T{0});
    } else if (t->grad.size() != t->data.size()) {
      t->grad.assign(t->data.size(), T{0});
    }
  }
  impl_->grad[0] += T{1};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* t = *it;
    if (t->node) t->node->backward(std::span<const T>(t->grad));
  }
  for (auto* t : order) {
    if (t->node) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<GradNode<T>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, const char*, std::vector<Tensor<float>>,
                                   std::function<void(std::span<const float>)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*, std::vector<Tensor<double>>,
                                    std::function<void(std::span<const double>)>);

}  // namespace deformer
