#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"

// Differentiable primitives. Every op returns a fresh tensor and records a
// backward closure when any input requires grad. Feature maps carry a leading
// batch axis; convolutions use the correlation convention (no kernel flip).

namespace deformer {

enum class Mode { kTrain, kEval };

/// Per-feature running statistics for batch normalisation.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t features)
      : running_mean(features, T{0}), running_var(features, T{1}) {}
};

namespace ops {

// --- layout ---------------------------------------------------------------
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// out.shape[i] = x.shape[axes[i]]
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
/// Swap the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);

// --- elementwise ------------------------------------------------------------
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
/// a + b where b's shape equals a trailing suffix of a's shape.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b);
/// x[:, c, ...] + bias[c]
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);
/// alpha = 1
template <typename T>
Tensor<T> elu(const Tensor<T>& x);
/// Exact form x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// --- reductions -------------------------------------------------------------
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// Mean over the last axis; drops that axis.
template <typename T>
Tensor<T> mean_last(const Tensor<T>& x);
/// Repeats x along a new trailing axis of extent n.
template <typename T>
Tensor<T> expand_last(const Tensor<T>& x, std::size_t n);

// --- linear algebra ---------------------------------------------------------
/// Rank 2 or 3 operands; a rank-2 operand (or batch 1) broadcasts over the
/// other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [..., in] * w [in, out] (+ bias [out])
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {});

// --- convolution / pooling --------------------------------------------------
/// x [B, k_in, c, L], w [k_out, k_in, 1, K] -> [B, k_out, c, L]; K odd.
template <typename T>
Tensor<T> conv_temporal(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
/// x [B, k_in, c, L], w [k_out, k_in, c, 1] -> [B, k_out, 1, L].
template <typename T>
Tensor<T> conv_spatial(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
/// x [B, k_in, L], w [k_out, k_in, K] -> [B, k_out, L]; K odd.
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
/// w[o] = g[o] * v[o] / ||v[o]||, one norm per leading index.
template <typename T>
Tensor<T> weight_norm(const Tensor<T>& v, const Tensor<T>& g);
/// Window 2, stride 2 along `axis`; an odd trailing element is dropped.
/// Gradient goes to the first maximal element of each window.
template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, std::size_t axis);

// --- normalisation / activations --------------------------------------------
/// Statistics per feature on axis 1, pooled over every other axis.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode);
/// Over the last axis.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-5);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// Inverted dropout. Identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, RngState& rng);

// --- loss -------------------------------------------------------------------
/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace ops
}  // namespace deformer
