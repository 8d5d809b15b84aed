#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deformer/config.hpp"
#include "deformer/ops.hpp"
#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Shape algebra
// ---------------------------------------------------------------------------

/// Every intermediate per-sample shape of one forward pass, derived from the
/// config alone. Row names match the keys recorded in ForwardTrace.
struct ShapeAudit {
  std::size_t kernel_length = 0;
  /// segment_len followed by each successive halving (encoder, then blocks).
  std::vector<std::size_t> length_chain;
  std::size_t embedding_len = 0;
  std::vector<std::pair<std::string, Shape>> rows;

  const Shape& at(const std::string& name) const;
};

ShapeAudit shape_audit(const ModelConfig& config);

/// Exact count of learnable scalars.
std::size_t param_count(const ModelConfig& config);

/// Multiply-accumulates of one single-sample forward pass:
///   temporal conv   k * c * l * K
///   spatial conv    k * k * c * l
///   per block (input length L, P = floor(L/2), hd = heads * head_dim):
///     qkv projection   k * P * 3hd
///     attention        2 * heads * k * k * head_dim   (QK^T and AV)
///     output proj.     k * hd * P
///     FFN              2 * k * P * H,  H = hidden width
///     FTL conv         k * k * K * L  (only when enabled)
///   classifier      embedding_len * n_classes
/// Normalisation, activations, softmax and pooling are not counted.
std::size_t macs_estimate(const ModelConfig& config);

/// FFN hidden width for an FFN acting on rows of length `width`.
std::size_t ffn_hidden(const ModelConfig& config, std::size_t width);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct EncoderParams {
  Tensor<T> temporal_w, temporal_b;             // [k, 1, 1, K], [k]
  Tensor<T> spatial_v, spatial_g, spatial_b;    // [k, k, c, 1], [k], [k]
  Tensor<T> bn_gamma, bn_beta;                  // [k]
  BatchNormState<T> bn;
  Tensor<T> pos;                                // [k, l/2]
};

template <typename T>
struct BlockParams {
  std::size_t in_len = 0;                       // L entering the block
  Tensor<T> qkv_w;                              // [L/2, 3 * heads * head_dim]
  Tensor<T> attn_w;                             // [heads * head_dim, L/2]
  Tensor<T> ln_gamma, ln_beta;                  // [L/2]
  Tensor<T> ffn1_w, ffn1_b, ffn2_w, ffn2_b;     // [L/2, H], [H], [H, L/2], [L/2]
  Tensor<T> ftl_w, ftl_b;                       // [k, k, K], [k]
  Tensor<T> ftl_bn_gamma, ftl_bn_beta;          // [k]
  BatchNormState<T> ftl_bn;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct NamedBatchNorm {
  std::string name;
  BatchNormState<T>* state;
};

/// Intermediates of one forward pass (batched: leading axis is the batch).
template <typename T>
struct ForwardTrace {
  struct Block {
    Tensor<T> input, pooled, q, k, v, msa, coarse, fine, output, ip;
  };
  Tensor<T> tokens;  // F after the encoder
  std::vector<Block> blocks;
  Tensor<T> embedding;
  Tensor<T> logits;
};

template <typename T>
struct HctOutput {
  Tensor<T> next, fine, coarse;  // fine is undefined when the FTL branch is off
};

/// Scaled dot-product attention per head: softmax(Q K^T / sqrt(d)) V.
/// q, k, v: [..., tokens, d] with matching leading extents.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Purification of x [..., L] along the last axis:
/// power -> log(mean(x^2) + eps), mean -> mean(x), std -> sqrt(var(x) + eps).
template <typename T>
Tensor<T> ip_unit(const Tensor<T>& x, IpMode mode, double eps);

template <typename T>
class Deformer {
 public:
  /// Validates the config and initialises every parameter from `seed`.
  Deformer(ModelConfig config, std::uint64_t seed);

  Deformer(const Deformer&) = delete;
  Deformer& operator=(const Deformer&) = delete;
  Deformer(Deformer&&) = default;
  Deformer& operator=(Deformer&&) = default;

  const ModelConfig& config() const { return config_; }

  /// x [B, c, l] -> logits [B, n_classes].
  Tensor<T> forward(const Tensor<T>& x, Mode mode, RngState& rng, ForwardTrace<T>* trace = nullptr);

  // Stages, exposed individually for testing.
  /// [B, c, l] -> [B, k, l/2]
  Tensor<T> shallow_encode(const Tensor<T>& x, Mode mode);
  /// [B, k, L] -> Q, K, V each [B, heads, k, head_dim]
  std::vector<Tensor<T>> project_qkv(std::size_t block, const Tensor<T>& f);
  /// [B, k, L] -> [B, k, L/2]
  Tensor<T> msa(std::size_t block, const Tensor<T>& f);
  Tensor<T> coarse_branch(std::size_t block, const Tensor<T>& f);
  Tensor<T> fine_branch(std::size_t block, const Tensor<T>& f, Mode mode, RngState& rng);
  HctOutput<T> hct_forward(std::size_t block, const Tensor<T>& f, Mode mode, RngState& rng);

  EncoderParams<T>& encoder() { return encoder_; }
  BlockParams<T>& block(std::size_t i) { return blocks_.at(i); }
  Tensor<T>& classifier_w() { return cls_w_; }
  Tensor<T>& classifier_b() { return cls_b_; }

  /// Registry in a fixed order; tensors alias the model's storage.
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  /// Normalisation states in a fixed order; pointers into this model.
  std::vector<NamedBatchNorm<T>> batchnorms();
  std::size_t parameter_count() const;
  void zero_grad();

  /// Compares recorded shapes with shape_audit; throws DimensionError.
  void check_trace(const ForwardTrace<T>& trace) const;

 private:
  Tensor<T> msa_pooled(std::size_t block, const Tensor<T>& pooled, ForwardTrace<T>* trace);
  Tensor<T> coarse_pooled(std::size_t block, const Tensor<T>& pooled, ForwardTrace<T>* trace);
  void register_params();

  ModelConfig config_;
  ShapeAudit audit_;
  EncoderParams<T> encoder_;
  std::vector<BlockParams<T>> blocks_;
  Tensor<T> cls_w_, cls_b_;
  std::vector<NamedTensor<T>> params_;
};

}  // namespace deformer
