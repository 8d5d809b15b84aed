#include "deformer/model.hpp"

#include <algorithm>
#include <cmath>

#include "deformer/errors.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Shape algebra
// ---------------------------------------------------------------------------

const Shape& ShapeAudit::at(const std::string& name) const {
  for (const auto& [n, s] : rows)
    if (n == name) return s;
  throw LookupError("shape_audit: no row named '" + name + "'");
}

std::size_t ffn_hidden(const ModelConfig& config, std::size_t width) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(config.ffn_expansion * width)));
}

namespace {

bool ip_included(const ModelConfig& c, std::size_t block) {
  if (std::find(c.ip_removed.begin(), c.ip_removed.end(), block) != c.ip_removed.end()) return false;
  if (c.ip_mode == IpMode::kNone && !c.dense_enabled) return false;
  return c.dense_enabled || block + 1 == c.depth;
}

std::size_t ip_width(const ModelConfig& c, std::size_t pooled_len) {
  return c.ip_mode == IpMode::kNone ? c.kernels * pooled_len : c.kernels;
}

}  // namespace

ShapeAudit shape_audit(const ModelConfig& config) {
  config.validate();
  const std::size_t c = config.channels, l = config.segment_len, k = config.kernels;
  const std::size_t h = config.heads, d = config.head_dim;
  ShapeAudit a;
  a.kernel_length = config.kernel_length();
  a.length_chain.push_back(l);
  a.rows.emplace_back("input", Shape{c, l});
  a.rows.emplace_back("encoder.temporal", Shape{k, c, l});
  a.rows.emplace_back("encoder.spatial", Shape{k, 1, l});
  a.rows.emplace_back("encoder.pooled", Shape{k, 1, l / 2});
  a.rows.emplace_back("tokens", Shape{k, l / 2});
  std::size_t len = l / 2;
  a.length_chain.push_back(len);
  std::size_t embedding = 0;
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::string p = "block" + std::to_string(i + 1) + ".";
    const std::size_t half = len / 2;
    a.rows.emplace_back(p + "input", Shape{k, len});
    a.rows.emplace_back(p + "pooled", Shape{k, half});
    a.rows.emplace_back(p + "q", Shape{h, k, d});
    a.rows.emplace_back(p + "k", Shape{h, k, d});
    a.rows.emplace_back(p + "v", Shape{h, k, d});
    a.rows.emplace_back(p + "attn", Shape{h, k, k});
    a.rows.emplace_back(p + "msa", Shape{k, half});
    a.rows.emplace_back(p + "coarse", Shape{k, half});
    if (config.ftl_enabled) a.rows.emplace_back(p + "fine", Shape{k, half});
    a.rows.emplace_back(p + "output", Shape{k, half});
    if (ip_included(config, i)) {
      a.rows.emplace_back(p + "ip", Shape{ip_width(config, half)});
      embedding += ip_width(config, half);
    }
    len = half;
    a.length_chain.push_back(len);
  }
  embedding += k * len;
  a.embedding_len = embedding;
  a.rows.emplace_back("embedding", Shape{embedding});
  a.rows.emplace_back("logits", Shape{config.n_classes});
  return a;
}

std::size_t param_count(const ModelConfig& config) {
  const ShapeAudit a = shape_audit(config);
  const std::size_t c = config.channels, k = config.kernels, K = a.kernel_length;
  const std::size_t hd = config.heads * config.head_dim;
  std::size_t n = 0;
  n += k * K + k;                    // temporal conv
  n += k * k * c + k + k;            // spatial conv: direction, gain, bias
  n += 2 * k;                        // encoder BN
  n += k * a.length_chain[1];        // position encoding
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::size_t p = a.length_chain[i + 2];
    const std::size_t hidden = ffn_hidden(config, p);
    n += p * 3 * hd + hd * p;        // qkv, output projection
    n += 2 * p;                      // LN
    n += p * hidden + hidden + hidden * p + p;
    if (config.ftl_enabled) n += k * k * K + k + 2 * k;
  }
  n += a.embedding_len * config.n_classes + config.n_classes;
  return n;
}

std::size_t macs_estimate(const ModelConfig& config) {
  const ShapeAudit a = shape_audit(config);
  const std::size_t c = config.channels, l = config.segment_len, k = config.kernels;
  const std::size_t K = a.kernel_length, h = config.heads, d = config.head_dim, hd = h * d;
  std::size_t n = k * c * l * K + k * k * c * l;
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::size_t len = a.length_chain[i + 1];
    const std::size_t p = a.length_chain[i + 2];
    n += k * p * 3 * hd;
    n += 2 * h * k * k * d;
    n += k * hd * p;
    n += 2 * k * p * ffn_hidden(config, p);
    if (config.ftl_enabled) n += k * k * K * len;
  }
  n += a.embedding_len * config.n_classes;
  return n;
}

// ---------------------------------------------------------------------------
// Free-standing pieces
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.shape() != k.shape() || q.dim() < 2 || v.dim() != q.dim() ||
      !std::equal(q.shape().begin(), q.shape().end() - 1, v.shape().begin())) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  const std::size_t tokens = q.size(q.dim() - 2), d = q.shape().back(), dv = v.shape().back();
  const std::size_t groups = q.numel() / (tokens * d);
  Shape out_shape = v.shape();
  auto q3 = ops::reshape(q, Shape{groups, tokens, d});
  auto k3 = ops::reshape(k, Shape{groups, tokens, d});
  auto v3 = ops::reshape(v, Shape{groups, tokens, dv});
  auto scores = ops::scale(ops::matmul(q3, ops::transpose(k3)), static_cast<T>(1.0 / std::sqrt(double(d))));
  auto weights = ops::softmax(scores, 2);
  return ops::reshape(ops::matmul(weights, v3), out_shape);
}

template <typename T>
Tensor<T> ip_unit(const Tensor<T>& x, IpMode mode, double eps) {
  switch (mode) {
    case IpMode::kPower:
      return ops::log(ops::add_scalar(ops::mean_last(ops::square(x)), static_cast<T>(eps)));
    case IpMode::kMean:
      return ops::mean_last(x);
    case IpMode::kStd: {
      auto centred = ops::sub(x, ops::expand_last(ops::mean_last(x), x.shape().back()));
      return ops::sqrt(ops::add_scalar(ops::mean_last(ops::square(centred)), static_cast<T>(eps)));
    }
    case IpMode::kNone:
      break;
  }
  throw ConfigError("ip_unit: mode 'none' has no purification");
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> uniform_param(const RngState& root, const std::string& name, Shape shape, std::size_t fan_in) {
  RngState rng = root.split(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> filled_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
Deformer<T>::Deformer(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), audit_(shape_audit(config_)) {
  const RngState root = RngState::from_seed(seed).split("init");
  const std::size_t c = config_.channels, k = config_.kernels, K = audit_.kernel_length;
  const std::size_t hd = config_.heads * config_.head_dim;

  auto& e = encoder_;
  e.temporal_w = uniform_param<T>(root, "encoder.temporal.weight", {k, 1, 1, K}, K);
  e.temporal_b = uniform_param<T>(root, "encoder.temporal.bias", {k}, K);
  e.spatial_v = uniform_param<T>(root, "encoder.spatial.direction", {k, k, c, 1}, k * c);
  // Gain starts at ||v|| so the effective weight equals the initial direction.
  e.spatial_g = filled_param<T>({k}, T{0});
  for (std::size_t o = 0; o < k; ++o) {
    double ss = 0.0;
    for (std::size_t i = 0; i < k * c; ++i) ss += double(e.spatial_v[o * k * c + i]) * e.spatial_v[o * k * c + i];
    e.spatial_g[o] = static_cast<T>(std::sqrt(ss));
  }
  e.spatial_b = uniform_param<T>(root, "encoder.spatial.bias", {k}, k * c);
  e.bn_gamma = filled_param<T>({k}, T{1});
  e.bn_beta = filled_param<T>({k}, T{0});
  e.bn = BatchNormState<T>(k);
  {
    RngState rng = root.split("encoder.pos");
    e.pos = Tensor<T>(Shape{k, audit_.length_chain[1]});
    for (auto& v : e.pos.data()) v = static_cast<T>(0.02 * rng.normal());
    e.pos.set_requires_grad(true);
  }

  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const std::size_t len = audit_.length_chain[i + 1];
    const std::size_t half = audit_.length_chain[i + 2];
    const std::size_t hidden = ffn_hidden(config_, half);
    BlockParams<T> b;
    b.in_len = len;
    b.qkv_w = uniform_param<T>(root, p + "qkv.weight", {half, 3 * hd}, half);
    b.attn_w = uniform_param<T>(root, p + "attn_out.weight", {hd, half}, hd);
    b.ln_gamma = filled_param<T>({half}, T{1});
    b.ln_beta = filled_param<T>({half}, T{0});
    b.ffn1_w = uniform_param<T>(root, p + "ffn1.weight", {half, hidden}, half);
    b.ffn1_b = uniform_param<T>(root, p + "ffn1.bias", {hidden}, half);
    b.ffn2_w = uniform_param<T>(root, p + "ffn2.weight", {hidden, half}, hidden);
    b.ffn2_b = uniform_param<T>(root, p + "ffn2.bias", {half}, hidden);
    if (config_.ftl_enabled) {
      b.ftl_w = uniform_param<T>(root, p + "ftl.weight", {k, k, K}, k * K);
      b.ftl_b = uniform_param<T>(root, p + "ftl.bias", {k}, k * K);
      b.ftl_bn_gamma = filled_param<T>({k}, T{1});
      b.ftl_bn_beta = filled_param<T>({k}, T{0});
      b.ftl_bn = BatchNormState<T>(k);
    }
    blocks_.push_back(std::move(b));
  }
  cls_w_ = uniform_param<T>(root, "classifier.weight", {audit_.embedding_len, config_.n_classes},
                            audit_.embedding_len);
  cls_b_ = uniform_param<T>(root, "classifier.bias", {config_.n_classes}, audit_.embedding_len);
  register_params();
}

template <typename T>
void Deformer<T>::register_params() {
  params_.clear();
  auto add = [&](std::string name, const Tensor<T>& t) { params_.push_back({std::move(name), t}); };
  add("encoder.temporal.weight", encoder_.temporal_w);
  add("encoder.temporal.bias", encoder_.temporal_b);
  add("encoder.spatial.direction", encoder_.spatial_v);
  add("encoder.spatial.gain", encoder_.spatial_g);
  add("encoder.spatial.bias", encoder_.spatial_b);
  add("encoder.bn.gamma", encoder_.bn_gamma);
  add("encoder.bn.beta", encoder_.bn_beta);
  add("encoder.pos", encoder_.pos);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& b = blocks_[i];
    add(p + "qkv.weight", b.qkv_w);
    add(p + "attn_out.weight", b.attn_w);
    add(p + "ln.gamma", b.ln_gamma);
    add(p + "ln.beta", b.ln_beta);
    add(p + "ffn1.weight", b.ffn1_w);
    add(p + "ffn1.bias", b.ffn1_b);
    add(p + "ffn2.weight", b.ffn2_w);
    add(p + "ffn2.bias", b.ffn2_b);
    if (config_.ftl_enabled) {
      add(p + "ftl.weight", b.ftl_w);
      add(p + "ftl.bias", b.ftl_b);
      add(p + "ftl.bn.gamma", b.ftl_bn_gamma);
      add(p + "ftl.bn.beta", b.ftl_bn_beta);
    }
  }
  add("classifier.weight", cls_w_);
  add("classifier.bias", cls_b_);
}

template <typename T>
std::vector<NamedBatchNorm<T>> Deformer<T>::batchnorms() {
  std::vector<NamedBatchNorm<T>> out{{"encoder.bn", &encoder_.bn}};
  if (config_.ftl_enabled)
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      out.push_back({"blocks." + std::to_string(i) + ".ftl.bn", &blocks_[i].ftl_bn});
  return out;
}

template <typename T>
std::size_t Deformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void Deformer<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Deformer<T>::shallow_encode(const Tensor<T>& x, Mode mode) {
  const std::size_t c = config_.channels, l = config_.segment_len, k = config_.kernels;
  if (x.dim() != 3 || x.size(1) != c || x.size(2) != l) {
    throw DimensionError("shallow_encode: expected [B, " + std::to_string(c) + ", " + std::to_string(l) +
                         "], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.size(0);
  auto& e = encoder_;
  auto h = ops::conv_temporal(ops::reshape(x, Shape{batch, 1, c, l}), e.temporal_w, e.temporal_b);
  h = ops::conv_spatial(h, ops::weight_norm(e.spatial_v, e.spatial_g), e.spatial_b);
  h = ops::maxpool(ops::elu(ops::batchnorm(h, e.bn_gamma, e.bn_beta, e.bn, mode)), 3);
  return ops::add_broadcast(ops::reshape(h, Shape{batch, k, l / 2}), e.pos);
}

template <typename T>
std::vector<Tensor<T>> Deformer<T>::project_qkv(std::size_t block, const Tensor<T>& f) {
  ForwardTrace<T> scratch;
  scratch.blocks.resize(1);
  msa_pooled(block, ops::maxpool(f, 2), &scratch);
  return {scratch.blocks[0].q, scratch.blocks[0].k, scratch.blocks[0].v};
}

template <typename T>
Tensor<T> Deformer<T>::msa_pooled(std::size_t block, const Tensor<T>& pooled, ForwardTrace<T>* trace) {
  const auto& b = blocks_.at(block);
  const std::size_t batch = pooled.size(0), k = config_.kernels;
  const std::size_t h = config_.heads, d = config_.head_dim;
  // One fused projection, then [B, k, 3, h, d] -> [3, B, h, k, d].
  auto qkv = ops::matmul(pooled, b.qkv_w);
  qkv = ops::permute(ops::reshape(qkv, Shape{batch, k, 3, h, d}), {2, 0, 3, 1, 4});
  auto take = [&](std::size_t i) { return ops::reshape(ops::slice(qkv, 0, i, 1), Shape{batch, h, k, d}); };
  auto q = take(0), kk = take(1), v = take(2);
  if (trace) {
    trace->blocks.back().q = q;
    trace->blocks.back().k = kk;
    trace->blocks.back().v = v;
  }
  auto heads = attention(q, kk, v);                                  // [B, h, k, d]
  auto merged = ops::reshape(ops::permute(heads, {0, 2, 1, 3}), Shape{batch, k, h * d});
  return ops::matmul(merged, b.attn_w);
}

template <typename T>
Tensor<T> Deformer<T>::msa(std::size_t block, const Tensor<T>& f) {
  return msa_pooled(block, ops::maxpool(f, 2), nullptr);
}

template <typename T>
Tensor<T> Deformer<T>::coarse_pooled(std::size_t block, const Tensor<T>& pooled, ForwardTrace<T>* trace) {
  const auto& b = blocks_.at(block);
  auto m = msa_pooled(block, pooled, trace);
  if (trace) trace->blocks.back().msa = m;
  auto normed = ops::layernorm(ops::add(m, pooled), b.ln_gamma, b.ln_beta);
  return ops::linear(ops::gelu(ops::linear(normed, b.ffn1_w, b.ffn1_b)), b.ffn2_w, b.ffn2_b);
}

template <typename T>
Tensor<T> Deformer<T>::coarse_branch(std::size_t block, const Tensor<T>& f) {
  return coarse_pooled(block, ops::maxpool(f, 2), nullptr);
}

template <typename T>
Tensor<T> Deformer<T>::fine_branch(std::size_t block, const Tensor<T>& f, Mode mode, RngState& rng) {
  if (!config_.ftl_enabled) throw ConfigError("fine_branch: the FTL branch is disabled in this config");
  auto& b = blocks_.at(block);
  auto h = ops::dropout(f, config_.dropout_p, mode, rng);
  h = ops::conv1d_same(h, b.ftl_w, b.ftl_b);
  h = ops::elu(ops::batchnorm(h, b.ftl_bn_gamma, b.ftl_bn_beta, b.ftl_bn, mode));
  return ops::maxpool(h, 2);
}

template <typename T>
HctOutput<T> Deformer<T>::hct_forward(std::size_t block, const Tensor<T>& f, Mode mode, RngState& rng) {
  HctOutput<T> out;
  out.coarse = coarse_branch(block, f);
  if (config_.ftl_enabled) {
    out.fine = fine_branch(block, f, mode, rng);
    out.next = ops::add(out.coarse, out.fine);
  } else {
    out.next = out.coarse;
  }
  return out;
}

template <typename T>
Tensor<T> Deformer<T>::forward(const Tensor<T>& x, Mode mode, RngState& rng, ForwardTrace<T>* trace) {
#ifndef NDEBUG
  ForwardTrace<T> debug_trace;
  if (!trace) trace = &debug_trace;
#endif
  if (trace) *trace = ForwardTrace<T>{};
  const std::size_t batch = x.dim() == 3 ? x.size(0) : 0;
  auto f = shallow_encode(x, mode);
  if (trace) trace->tokens = f;

  std::vector<Tensor<T>> parts{Tensor<T>()};  // slot 0: flattened final features
  const IpSource source = config_.effective_ip_source();
  for (std::size_t i = 0; i < config_.depth; ++i) {
    if (trace) {
      trace->blocks.emplace_back();
      trace->blocks.back().input = f;
    }
    auto pooled = ops::maxpool(f, 2);
    HctOutput<T> out;
    out.coarse = coarse_pooled(i, pooled, trace);
    if (config_.ftl_enabled) {
      out.fine = fine_branch(i, f, mode, rng);
      out.next = ops::add(out.coarse, out.fine);
    } else {
      out.next = out.coarse;
    }
    if (ip_included(config_, i)) {
      const Tensor<T>& src = source == IpSource::kFine     ? out.fine
                             : source == IpSource::kCoarse ? out.coarse
                                                           : out.next;
      auto ip = config_.ip_mode == IpMode::kNone ? ops::reshape(src, Shape{batch, src.numel() / batch})
                                                 : ip_unit(src, config_.ip_mode, config_.ip_eps);
      parts.push_back(ip);
      if (trace) trace->blocks.back().ip = ip;
    }
    if (trace) {
      auto& tb = trace->blocks.back();
      tb.pooled = pooled;
      tb.coarse = out.coarse;
      tb.fine = out.fine;
      tb.output = out.next;
    }
    f = out.next;
  }
  parts[0] = ops::reshape(f, Shape{batch, f.numel() / batch});
  auto embedding = parts.size() == 1 ? parts[0] : ops::concat(parts, 1);
  auto logits = ops::linear(embedding, cls_w_, cls_b_);
  if (trace) {
    trace->embedding = embedding;
    trace->logits = logits;
#ifndef NDEBUG
    check_trace(*trace);
#endif
  }
  return logits;
}

template <typename T>
void Deformer<T>::check_trace(const ForwardTrace<T>& trace) const {
  auto expect = [&](const std::string& name, const Tensor<T>& t) {
    if (!t.defined()) throw DimensionError("trace: '" + name + "' was not recorded");
    const Shape got(t.shape().begin() + 1, t.shape().end());
    const Shape& want = audit_.at(name);
    if (got != want) {
      throw DimensionError("trace: '" + name + "' has per-sample shape " + shape_str(got) +
                           ", shape_audit predicts " + shape_str(want));
    }
  };
  expect("tokens", trace.tokens);
  if (trace.blocks.size() != config_.depth) throw DimensionError("trace: wrong number of blocks");
  for (std::size_t i = 0; i < trace.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i + 1) + ".";
    const auto& b = trace.blocks[i];
    expect(p + "input", b.input);
    expect(p + "pooled", b.pooled);
    expect(p + "q", b.q);
    expect(p + "k", b.k);
    expect(p + "v", b.v);
    expect(p + "msa", b.msa);
    expect(p + "coarse", b.coarse);
    if (config_.ftl_enabled) expect(p + "fine", b.fine);
    expect(p + "output", b.output);
    if (ip_included(config_, i)) expect(p + "ip", b.ip);
  }
  expect("embedding", trace.embedding);
  expect("logits", trace.logits);
}

template class Deformer<float>;
template class Deformer<double>;
template Tensor<float> attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<float> ip_unit(const Tensor<float>&, IpMode, double);
template Tensor<double> ip_unit(const Tensor<double>&, IpMode, double);

}  // namespace deformer
