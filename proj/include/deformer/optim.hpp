#pragma once

#include <span>
#include <vector>

#include "deformer/tensor.hpp"

namespace deformer {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

/// One bias-corrected Adam update of p in place. `step` counts from 1.
/// The effective gradient is g + weight_decay * p.
template <typename T>
void adam_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t step, double lr,
                 const AdamHyper& h);

/// Adam over a fixed parameter list. Tensors alias the model's storage; a
/// parameter without an allocated gradient is stepped with g = 0.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamHyper hyper);

  void step(double lr);

  std::size_t steps = 0;
  std::vector<std::vector<T>> m, v;

  const AdamHyper& hyper() const { return hyper_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamHyper hyper_;
};

/// lr_min + (lr0 - lr_min) (1 + cos(pi epoch / total)) / 2, lr_min past the end.
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min);

}  // namespace deformer
