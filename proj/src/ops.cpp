#include "deformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "deformer/errors.hpp"
#include "deformer/kernels.hpp"

namespace deformer::ops {

namespace {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                         " differ");
  }
}

template <typename T>
using Saved = std::shared_ptr<const std::vector<T>>;

template <typename T>
Saved<T> save(std::vector<T> v) {
  return std::make_shared<const std::vector<T>>(std::move(v));
}

// Elementwise unary op with derivative evaluated from the input value.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, D df) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  return make_result<T>(x.shape(), std::move(out), name, {x}, [x, df](std::span<const T> g) {
    if (T* gx = x.grad_sink()) {
      auto xd = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xd[i]);
    }
  });
}

void require_odd_kernel(std::size_t ksize, const char* op) {
  if (ksize % 2 == 0) {
    throw ConfigError(std::string(op) + ": kernel length " + std::to_string(ksize) +
                      " must be odd for same padding");
  }
}

// Shared body of the row-wise same-padded convolutions.
template <typename T>
Tensor<T> conv_rows(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                    const kernels::ConvArgs& args, Shape out_shape, const char* name) {
  if (bias.defined() && bias.numel() != args.c_out) {
    throw DimensionError(std::string(name) + ": bias of shape " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(args.c_out) + " output kernels");
  }
  std::vector<T> out(shape_numel(out_shape));
  kernels::conv_forward<T>(args, x.data().data(), w.data().data(),
                           bias.defined() ? bias.data().data() : nullptr, out.data());
  std::vector<Tensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out_shape), std::move(out), name, std::move(inputs),
                        [x, w, bias, args](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            kernels::conv_backward_input<T>(args, w.data().data(), g.data(), gx);
                          T* gw = w.grad_sink();
                          T* gb = bias.defined() ? bias.grad_sink() : nullptr;
                          if (gw || gb)
                            kernels::conv_backward_weight<T>(args, x.data().data(), g.data(), gw, gb);
                        });
}

}  // namespace

// --- layout -------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), "reshape", {x}, [x](std::span<const T> g) {
    if (T* gx = x.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  std::vector<bool> seen(rank, false);
  if (axes.size() != rank) throw DimensionError("permute: axis list does not match rank of " + shape_str(in));
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid axis list for " + shape_str(in));
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[axes[i]];
    src_strides[i] = in_strides[axes[i]];
  }
  // Flat source index for each destination element.
  const std::size_t n = x.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < n; ++dst) {
    (*index)[dst] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += src_strides[d];
        break;
      }
      src -= src_strides[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*index)[i]];
  return make_result<T>(std::move(out_shape), std::move(out), "permute", {x},
                        [x, index](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] += g[i];
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.dim() < 2) throw DimensionError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(x.shape(), axis, "slice");
  if (start + length > s.extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(s.outer * length * s.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  return make_result<T>(std::move(out_shape), std::move(out), "slice", {x},
                        [x, s, start, length](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t i = 0; i < length * s.inner; ++i)
                                gx[(o * s.extent + start) * s.inner + i] += g[o * length * s.inner + i];
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  Shape out_shape = xs.front().shape();
  const AxisSplit first = split_at(out_shape, axis, "concat");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& t : xs) {
    Shape probe = t.shape();
    if (probe.size() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_str(probe));
    extents.push_back(probe[axis]);
    probe[axis] = out_shape[axis];
    require_same_shape(probe, out_shape, "concat");
    total += extents.back();
  }
  out_shape[axis] = total;
  std::vector<T> out(first.outer * total * first.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t chunk = extents[k] * first.inner;
    auto xd = xs[k].data();
    for (std::size_t o = 0; o < first.outer; ++o)
      std::copy_n(xd.begin() + o * chunk, chunk, out.begin() + (o * total + offset) * first.inner);
    offset += extents[k];
  }
  return make_result<T>(std::move(out_shape), std::move(out), "concat", xs,
                        [xs, extents, first, total](std::span<const T> g) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < xs.size(); ++k) {
                            const std::size_t chunk = extents[k] * first.inner;
                            if (T* gx = xs[k].grad_sink())
                              for (std::size_t o = 0; o < first.outer; ++o)
                                for (std::size_t i = 0; i < chunk; ++i)
                                  gx[o * chunk + i] += g[(o * total + offset) * first.inner + i];
                            offset += extents[k];
                          }
                        });
}

// --- elementwise ----------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = a.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = b.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - bs.size())) {
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  const std::size_t n = b.numel();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i % n];
  return make_result<T>(as, std::move(out), "add_broadcast", {a, b}, [a, b, n](std::span<const T> g) {
    if (T* ga = a.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = b.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
  });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const AxisSplit s = split_at(x.shape(), 1, "add_channel_bias");
  if (bias.numel() != s.extent) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t k = (o * s.extent + c) * s.inner + i;
        out[k] = x[k] + bias[c];
      }
  return make_result<T>(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                        [x, bias, s](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          if (T* gb = bias.grad_sink())
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t c = 0; c < s.extent; ++c)
                                for (std::size_t i = 0; i < s.inner; ++i)
                                  gb[c] += g[(o * s.extent + c) * s.inner + i];
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = a.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = b.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = a.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    if (T* gb = b.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, "add_scalar", [value](T v) { return v + value; }, [](T) { return T{1}; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, "square", [](T v) { return v * v; }, [](T v) { return T{2} * v; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary(x, "sqrt", [](T v) { return std::sqrt(v); },
               [](T v) { return T{0.5} / std::sqrt(v); });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  return unary(x, "elu", [](T v) { return v > T{0} ? v : std::expm1(v); },
               [](T v) { return v > T{0} ? T{1} : std::exp(v); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = static_cast<T>(0.39894228040143267794);
  return unary(
      x, "gelu", [](T v) { return T{0.5} * v * (T{1} + std::erf(v * kInvSqrt2)); },
      [](T v) {
        const T cdf = T{0.5} * (T{1} + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T{-0.5} * v * v);
      });
}

// --- reductions -----------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (T v : x.data()) s += v;
  return make_result<T>(Shape{}, {s}, "sum", {x}, [x](std::span<const T> g) {
    if (T* gx = x.grad_sink())
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  if (x.dim() == 0 || x.shape().back() == 0) {
    throw DimensionError("mean_last: empty last axis in " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t i = 0; i < n; ++i) s += x[r * n + i];
    out[r] = s / static_cast<T>(n);
  }
  return make_result<T>(std::move(out_shape), std::move(out), "mean_last", {x},
                        [x, n, rows](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[r] / static_cast<T>(n);
                        });
}

template <typename T>
Tensor<T> expand_last(const Tensor<T>& x, std::size_t n) {
  Shape out_shape = x.shape();
  out_shape.push_back(n);
  std::vector<T> out(x.numel() * n);
  for (std::size_t r = 0; r < x.numel(); ++r) std::fill_n(out.begin() + r * n, n, x[r]);
  return make_result<T>(std::move(out_shape), std::move(out), "expand_last", {x},
                        [x, n](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t r = 0; r < x.numel(); ++r)
                              for (std::size_t i = 0; i < n; ++i) gx[r] += g[r * n + i];
                        });
}

// --- linear algebra -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bad = [&] {
    return DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  };
  if (a.dim() < 2 || a.dim() > 3 || b.dim() < 2 || b.dim() > 3) throw bad();
  const std::size_t ab = a.dim() == 3 ? a.size(0) : 1;
  const std::size_t bb = b.dim() == 3 ? b.size(0) : 1;
  const std::size_t m = a.size(a.dim() - 2), k = a.size(a.dim() - 1);
  const std::size_t k2 = b.size(b.dim() - 2), n = b.size(b.dim() - 1);
  if (k != k2 || (ab != bb && ab != 1 && bb != 1)) throw bad();
  const std::size_t batch = std::max(ab, bb);
  const bool a_bcast = ab == 1 && batch > 1;
  const bool b_bcast = bb == 1 && batch > 1;

  Shape out_shape = (a.dim() == 3 || b.dim() == 3) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n);
  kernels::GemmArgs fwd{batch, m, n, k, a_bcast ? 0 : m * k, k, 1, b_bcast ? 0 : k * n, n, 1, m * n, false};
  kernels::gemm<T>(fwd, a.data().data(), b.data().data(), out.data());

  return make_result<T>(
      std::move(out_shape), std::move(out), "matmul", {a, b},
      [a, b, batch, m, n, k, a_bcast, b_bcast](std::span<const T> g) {
        if (T* ga = a.grad_sink()) {
          // dA = dC * B^T
          kernels::GemmArgs args{batch, m, k, n, m * n, n, 1, b_bcast ? 0 : k * n, 1, n,
                                 a_bcast ? 0 : m * k, true};
          kernels::gemm<T>(args, g.data(), b.data().data(), ga);
        }
        if (T* gb = b.grad_sink()) {
          // dB = A^T * dC
          kernels::GemmArgs args{batch, k, n, m, a_bcast ? 0 : m * k, 1, k, m * n, n, 1,
                                 b_bcast ? 0 : k * n, true};
          kernels::gemm<T>(args, a.data().data(), g.data(), gb);
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.dim() != 2 || x.dim() == 0 || x.shape().back() != w.size(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  Tensor<T> y;
  if (x.dim() == 2 || x.dim() == 3) {
    y = matmul(x, w);
  } else {
    Shape out_shape = x.shape();
    out_shape.back() = w.size(1);
    y = reshape(matmul(reshape(x, Shape{x.numel() / w.size(0), w.size(0)}), w), out_shape);
  }
  return bias.defined() ? add_broadcast(y, bias) : y;
}

// --- convolution / pooling ------------------------------------------------------

template <typename T>
Tensor<T> conv_temporal(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.dim() != 4 || w.size(2) != 1) {
    throw DimensionError("conv_temporal: weight must be [k_out, k_in, 1, K], got " + shape_str(w.shape()));
  }
  require_odd_kernel(w.size(3), "conv_temporal");
  if (x.dim() != 4 || x.size(1) != w.size(1)) {
    throw DimensionError("conv_temporal: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  kernels::ConvArgs args{x.size(0), w.size(1), w.size(0), x.size(2), x.size(3), w.size(3)};
  return conv_rows(x, w, bias, args, Shape{x.size(0), w.size(0), x.size(2), x.size(3)}, "conv_temporal");
}

template <typename T>
Tensor<T> conv_spatial(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.dim() != 4 || w.size(3) != 1) {
    throw DimensionError("conv_spatial: weight must be [k_out, k_in, c, 1], got " + shape_str(w.shape()));
  }
  if (x.dim() != 4 || x.size(1) != w.size(1)) {
    throw DimensionError("conv_spatial: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (w.size(2) != x.size(2)) {
    throw ConfigError("conv_spatial: kernel height " + std::to_string(w.size(2)) +
                      " must equal the channel count " + std::to_string(x.size(2)));
  }
  const std::size_t batch = x.size(0), k_in = x.size(1), c = x.size(2), len = x.size(3);
  const std::size_t k_out = w.size(0);
  // A valid (c, 1) correlation is a per-sample product W[k_out, k_in*c] * X[k_in*c, L].
  Tensor<T> y = matmul(reshape(w, Shape{k_out, k_in * c}), reshape(x, Shape{batch, k_in * c, len}));
  if (bias.defined()) y = add_channel_bias(y, bias);
  return reshape(y, Shape{batch, k_out, 1, len});
}

template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.dim() != 3) {
    throw DimensionError("conv1d_same: weight must be [k_out, k_in, K], got " + shape_str(w.shape()));
  }
  require_odd_kernel(w.size(2), "conv1d_same");
  if (x.dim() != 3 || x.size(1) != w.size(1)) {
    throw DimensionError("conv1d_same: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  kernels::ConvArgs args{x.size(0), w.size(1), w.size(0), 1, x.size(2), w.size(2)};
  return conv_rows(x, w, bias, args, Shape{x.size(0), w.size(0), x.size(2)}, "conv1d_same");
}

template <typename T>
Tensor<T> weight_norm(const Tensor<T>& v, const Tensor<T>& g) {
  if (v.dim() == 0 || g.numel() != v.size(0)) {
    throw DimensionError("weight_norm: gain " + shape_str(g.shape()) + " does not match direction " +
                         shape_str(v.shape()));
  }
  const std::size_t rows = v.size(0);
  const std::size_t n = v.numel() / rows;
  std::vector<T> norms(rows);
  std::vector<T> out(v.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t i = 0; i < n; ++i) ss += v[r * n + i] * v[r * n + i];
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > T{0})) throw DomainError("weight_norm: direction row " + std::to_string(r) + " is zero");
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = g[r] * v[r * n + i] / norms[r];
  }
  auto saved = save(std::move(norms));
  return make_result<T>(v.shape(), std::move(out), "weight_norm", {v, g},
                        [v, g, saved, rows, n](std::span<const T> gw) {
                          T* gv = v.grad_sink();
                          T* gg = g.grad_sink();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T norm = (*saved)[r];
                            T dot{0};
                            for (std::size_t i = 0; i < n; ++i) dot += gw[r * n + i] * v[r * n + i];
                            if (gg) gg[r] += dot / norm;
                            if (gv) {
                              const T a = g[r] / norm;
                              const T b = dot / (norm * norm);
                              for (std::size_t i = 0; i < n; ++i)
                                gv[r * n + i] += a * (gw[r * n + i] - b * v[r * n + i]);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "maxpool");
  if (s.extent < 2) {
    throw DimensionError("maxpool: axis " + std::to_string(axis) + " of " + shape_str(x.shape()) +
                         " has extent < 2");
  }
  const std::size_t half = s.extent / 2;
  Shape out_shape = x.shape();
  out_shape[axis] = half;
  std::vector<T> out(s.outer * half * s.inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < half; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t first = (o * s.extent + 2 * j) * s.inner + i;
        const std::size_t second = first + s.inner;
        const std::size_t pick = x[second] > x[first] ? second : first;
        const std::size_t dst = (o * half + j) * s.inner + i;
        out[dst] = x[pick];
        (*argmax)[dst] = pick;
      }
  return make_result<T>(std::move(out_shape), std::move(out), "maxpool", {x},
                        [x, argmax](std::span<const T> g) {
                          if (T* gx = x.grad_sink())
                            for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                        });
}

// --- normalisation / activations ----------------------------------------------

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode) {
  const AxisSplit s = split_at(x.shape(), 1, "batchnorm");
  const std::size_t f = s.extent;
  if (gamma.numel() != f || beta.numel() != f || state.running_mean.size() != f ||
      state.running_var.size() != f) {
    throw DimensionError("batchnorm: feature axis of " + shape_str(x.shape()) +
                         " does not match affine/state length " + std::to_string(gamma.numel()));
  }
  const std::size_t count = s.outer * s.inner;
  const bool train = mode == Mode::kTrain;
  if (train && count < 2) {
    throw DimensionError("batchnorm: training needs more than one value per feature, got " +
                         shape_str(x.shape()));
  }
  std::vector<T> inv_std(f);
  std::vector<T> xhat(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < f; ++c) {
    T mu, var;
    if (train) {
      double acc = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) acc += x[(o * f + c) * s.inner + i];
      const double m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const double d = x[(o * f + c) * s.inner + i] - m;
          sq += d * d;
        }
      mu = static_cast<T>(m);
      var = static_cast<T>(sq / static_cast<double>(count));
      const T mom = static_cast<T>(state.momentum);
      state.running_mean[c] = (T{1} - mom) * state.running_mean[c] + mom * mu;
      state.running_var[c] = (T{1} - mom) * state.running_var[c] + mom * var;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = T{1} / std::sqrt(var + static_cast<T>(state.eps));
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t k = (o * f + c) * s.inner + i;
        xhat[k] = (x[k] - mu) * inv_std[c];
        out[k] = gamma[c] * xhat[k] + beta[c];
      }
  }
  auto saved_inv = save(std::move(inv_std));
  auto saved_hat = save(std::move(xhat));
  return make_result<T>(
      x.shape(), std::move(out), "batchnorm", {x, gamma, beta},
      [x, gamma, beta, s, count, train, saved_inv, saved_hat](std::span<const T> g) {
        const std::size_t f = s.extent;
        const auto& xh = *saved_hat;
        T* gx = x.grad_sink();
        T* gg = gamma.grad_sink();
        T* gb = beta.grad_sink();
        for (std::size_t c = 0; c < f; ++c) {
          T sum_g{0}, sum_gx{0};
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t k = (o * f + c) * s.inner + i;
              sum_g += g[k];
              sum_gx += g[k] * xh[k];
            }
          if (gg) gg[c] += sum_gx;
          if (gb) gb[c] += sum_g;
          if (!gx) continue;
          const T scale_c = gamma[c] * (*saved_inv)[c];
          const T inv_n = T{1} / static_cast<T>(count);
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t k = (o * f + c) * s.inner + i;
              gx[k] += train ? scale_c * (g[k] - inv_n * sum_g - xh[k] * inv_n * sum_gx) : scale_c * g[k];
            }
        }
      });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.dim() == 0 || gamma.numel() != x.shape().back() || beta.numel() != x.shape().back()) {
    throw DimensionError("layernorm: last axis of " + shape_str(x.shape()) +
                         " does not match affine length " + std::to_string(gamma.numel()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> inv_std(rows);
  std::vector<T> xhat(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T mu{0};
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (xr[i] - mu) * inv_std[r];
      out[r * n + i] = gamma[i] * xhat[r * n + i] + beta[i];
    }
  }
  auto saved_inv = save(std::move(inv_std));
  auto saved_hat = save(std::move(xhat));
  return make_result<T>(x.shape(), std::move(out), "layernorm", {x, gamma, beta},
                        [x, gamma, beta, n, rows, saved_inv, saved_hat](std::span<const T> g) {
                          const auto& xh = *saved_hat;
                          T* gx = x.grad_sink();
                          T* gg = gamma.grad_sink();
                          T* gb = beta.grad_sink();
                          for (std::size_t r = 0; r < rows; ++r) {
                            T sum_d{0}, sum_dx{0};
                            for (std::size_t i = 0; i < n; ++i) {
                              const std::size_t k = r * n + i;
                              const T d = g[k] * gamma[i];
                              sum_d += d;
                              sum_dx += d * xh[k];
                              if (gg) gg[i] += g[k] * xh[k];
                              if (gb) gb[i] += g[k];
                            }
                            if (!gx) continue;
                            const T inv_n = T{1} / static_cast<T>(n);
                            for (std::size_t i = 0; i < n; ++i) {
                              const std::size_t k = r * n + i;
                              gx[k] += (*saved_inv)[r] * (g[k] * gamma[i] - inv_n * sum_d - xh[k] * inv_n * sum_dx);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = x[base];
      for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, x[base + j * s.inner]);
      T z{0};
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= z;
    }
  auto saved = save(out);
  return make_result<T>(x.shape(), std::move(out), "softmax", {x}, [x, s, saved](std::span<const T> g) {
    T* gx = x.grad_sink();
    if (!gx) return;
    const auto& y = *saved;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot{0};
        for (std::size_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t k = base + j * s.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, RngState& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: probability " + std::to_string(p) + " must lie in [0, 1)");
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  auto saved = save(std::move(mask));
  return make_result<T>(x.shape(), std::move(out), "dropout", {x}, [x, saved](std::span<const T> g) {
    if (T* gx = x.grad_sink())
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*saved)[i];
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || logits.size(0) != labels.size() || labels.empty()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.size(0), classes = logits.size(1);
  std::vector<int> lab(labels.begin(), labels.end());
  for (int y : lab) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DomainError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
  }
  std::vector<T> probs(logits.numel());
  T loss{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = logits.data().data() + b * classes;
    const T mx = *std::max_element(z, z + classes);
    T sum_e{0};
    for (std::size_t c = 0; c < classes; ++c) sum_e += std::exp(z[c] - mx);
    const T lse = mx + std::log(sum_e);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(z[c] - lse);
    loss += lse - z[lab[b]];
  }
  loss /= static_cast<T>(batch);
  auto saved = save(std::move(probs));
  return make_result<T>(Shape{}, {loss}, "cross_entropy", {logits},
                        [logits, saved, lab, batch, classes](std::span<const T> g) {
                          T* gz = logits.grad_sink();
                          if (!gz) return;
                          const T w = g[0] / static_cast<T>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T onehot = static_cast<int>(c) == lab[b] ? T{1} : T{0};
                              gz[b * classes + c] += w * ((*saved)[b * classes + c] - onehot);
                            }
                        });
}

#define DEFORMER_INSTANTIATE(T)                                                                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                 \
  template Tensor<T> square(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                           \
  template Tensor<T> sqrt(const Tensor<T>&);                                                          \
  template Tensor<T> elu(const Tensor<T>&);                                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                          \
  template Tensor<T> mean_last(const Tensor<T>&);                                                     \
  template Tensor<T> expand_last(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> conv_temporal(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> conv_spatial(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> conv1d_same(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> weight_norm(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> maxpool(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                               BatchNormState<T>&, Mode);                                             \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);         \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, RngState&);                              \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);
DEFORMER_INSTANTIATE(float)
DEFORMER_INSTANTIATE(double)
#undef DEFORMER_INSTANTIATE

}  // namespace deformer::ops
