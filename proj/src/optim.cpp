#include "deformer/optim.hpp"

#include <cmath>
#include <numbers>

#include "deformer/errors.hpp"

namespace deformer {

template <typename T>
void adam_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t step, double lr,
                 const AdamHyper& h) {
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw DimensionError("adam_update: parameter, gradient and moment sizes differ");
  }
  if (step == 0) throw ContractError("adam_update: step counts from 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]) + h.weight_decay * static_cast<double>(p[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / c1;
    const double vhat = vi / c2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + h.eps));
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m.emplace_back(p.numel(), T{0});
    v.emplace_back(p.numel(), T{0});
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++steps;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.has_grad()) {
      adam_update<T>(p.data(), p.grad(), m[i], v[i], steps, lr, hyper_);
    } else {
      const std::vector<T> zeros(p.numel(), T{0});
      adam_update<T>(p.data(), zeros, m[i], v[i], steps, lr, hyper_);
    }
  }
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min) {
  if (total_epochs == 0) throw ConfigError("cosine_lr: total_epochs must be >= 1");
  if (epoch >= total_epochs) return lr_min;
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                 std::size_t, double, const AdamHyper&);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                  std::size_t, double, const AdamHyper&);
template class Adam<float>;
template class Adam<double>;

}  // namespace deformer
