#include "deformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "deformer/errors.hpp"

namespace deformer {

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(Tensor<T>&)>& f, Tensor<T>& x, T h) {
  Tensor<T> grad(x.shape());
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const T orig = xd[i];
    xd[i] = orig + h;
    const T up = f(x);
    xd[i] = orig - h;
    const T down = f(x);
    xd[i] = orig;
    grad[i] = (up - down) / (T{2} * h);
  }
  return grad;
}

template <typename T>
T max_relative_error(std::span<const T> analytic, std::span<const T> numeric, T floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " elements");
  }
  T worst{0};
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const T denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

template Tensor<float> finite_diff_grad(const std::function<float(Tensor<float>&)>&, Tensor<float>&, float);
template Tensor<double> finite_diff_grad(const std::function<double(Tensor<double>&)>&, Tensor<double>&,
                                         double);
template float max_relative_error(std::span<const float>, std::span<const float>, float);
template double max_relative_error(std::span<const double>, std::span<const double>, double);

}  // namespace deformer
