#pragma once

#include <functional>
#include <span>

#include "deformer/tensor.hpp"

namespace deformer {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element
/// of x. x is perturbed in place and restored; f must be deterministic.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(Tensor<T>&)>& f, Tensor<T>& x, T h);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps elements
/// whose true gradient is ~0 from dominating through round-off.
template <typename T>
T max_relative_error(std::span<const T> analytic, std::span<const T> numeric, T floor);

}  // namespace deformer
