#include <omp.h>

#include <algorithm>
#include <vector>

#include "deformer/kernels.hpp"

namespace deformer::kernels::parallel {

namespace {
// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 15;
}

template <typename T>
void gemm(const GemmArgs& g, const T* a, const T* b, T* c) {
  const std::size_t c_count = g.c_batch == 0 ? g.m * g.n : g.batch * g.m * g.n;
  if (!g.accumulate) std::fill(c, c + c_count, T{0});

  // Row-contiguous copy of B so the inner loop is a unit-stride axpy.
  const std::size_t b_copies = g.b_batch == 0 ? 1 : g.batch;
  std::vector<T> packed;
  const T* bsrc = b;
  std::size_t b_stride = g.b_batch;
  if (g.b_col != 1 || g.b_row != g.n) {
    packed.resize(b_copies * g.k * g.n);
    for (std::size_t bi = 0; bi < b_copies; ++bi)
      for (std::size_t p = 0; p < g.k; ++p)
        for (std::size_t j = 0; j < g.n; ++j)
          packed[(bi * g.k + p) * g.n + j] = b[bi * g.b_batch + p * g.b_row + j * g.b_col];
    bsrc = packed.data();
    b_stride = g.b_batch == 0 ? 0 : g.k * g.n;
  }

  const bool threaded = g.batch * g.m * g.n * g.k >= kMinParallelWork;
  const auto m = static_cast<std::ptrdiff_t>(g.m);
  if (g.c_batch == 0) {
#pragma omp parallel for schedule(static) if (threaded)
    for (std::ptrdiff_t i = 0; i < m; ++i) {
      T* crow = c + i * g.n;
      for (std::size_t bi = 0; bi < g.batch; ++bi) {
        const T* arow = a + bi * g.a_batch + i * g.a_row;
        const T* bb = bsrc + bi * b_stride;
        for (std::size_t p = 0; p < g.k; ++p) {
          const T av = arow[p * g.a_col];
          const T* brow = bb + p * g.n;
          for (std::size_t j = 0; j < g.n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  } else {
    const auto batch = static_cast<std::ptrdiff_t>(g.batch);
#pragma omp parallel for collapse(2) schedule(static) if (threaded)
    for (std::ptrdiff_t bi = 0; bi < batch; ++bi) {
      for (std::ptrdiff_t i = 0; i < m; ++i) {
        T* crow = c + bi * g.c_batch + i * g.n;
        const T* arow = a + bi * g.a_batch + i * g.a_row;
        const T* bb = bsrc + bi * b_stride;
        for (std::size_t p = 0; p < g.k; ++p) {
          const T av = arow[p * g.a_col];
          const T* brow = bb + p * g.n;
          for (std::size_t j = 0; j < g.n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

template <typename T>
void conv_forward(const ConvArgs& c, const T* x, const T* w, const T* bias, T* y) {
  const auto pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const auto len = static_cast<std::ptrdiff_t>(c.len);
  const auto batch = static_cast<std::ptrdiff_t>(c.batch);
  const auto c_out = static_cast<std::ptrdiff_t>(c.c_out);
  const bool threaded = c.batch * c.c_out * c.c_in * c.rows * c.len * c.ksize >= kMinParallelWork;
#pragma omp parallel for collapse(2) schedule(static) if (threaded)
  for (std::ptrdiff_t b = 0; b < batch; ++b) {
    for (std::ptrdiff_t o = 0; o < c_out; ++o) {
      T* yo = y + (b * c.c_out + o) * c.rows * c.len;
      std::fill(yo, yo + c.rows * c.len, bias ? bias[o] : T{0});
      for (std::size_t i = 0; i < c.c_in; ++i) {
        const T* wr = w + (o * c.c_in + i) * c.ksize;
        for (std::size_t q = 0; q < c.ksize; ++q) {
          const T wv = wr[q];
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(q) - pad;
          const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(len, len - shift);
          for (std::size_t h = 0; h < c.rows; ++h) {
            const T* xr = x + ((b * c.c_in + i) * c.rows + h) * c.len;
            T* yr = yo + h * c.len;
            for (std::ptrdiff_t t = t0; t < t1; ++t) yr[t] += wv * xr[t + shift];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input(const ConvArgs& c, const T* w, const T* dy, T* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const auto len = static_cast<std::ptrdiff_t>(c.len);
  const auto batch = static_cast<std::ptrdiff_t>(c.batch);
  const auto c_in = static_cast<std::ptrdiff_t>(c.c_in);
  const bool threaded = c.batch * c.c_out * c.c_in * c.rows * c.len * c.ksize >= kMinParallelWork;
#pragma omp parallel for collapse(2) schedule(static) if (threaded)
  for (std::ptrdiff_t b = 0; b < batch; ++b) {
    for (std::ptrdiff_t i = 0; i < c_in; ++i) {
      for (std::size_t o = 0; o < c.c_out; ++o) {
        const T* wr = w + (o * c.c_in + i) * c.ksize;
        for (std::size_t q = 0; q < c.ksize; ++q) {
          const T wv = wr[q];
          // dx[s] += w[q] * dy[s - q + pad]
          const std::ptrdiff_t shift = pad - static_cast<std::ptrdiff_t>(q);
          const std::ptrdiff_t s0 = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t s1 = std::min<std::ptrdiff_t>(len, len - shift);
          for (std::size_t h = 0; h < c.rows; ++h) {
            const T* dyr = dy + ((b * c.c_out + o) * c.rows + h) * c.len;
            T* dxr = dx + ((b * c.c_in + i) * c.rows + h) * c.len;
            for (std::ptrdiff_t s = s0; s < s1; ++s) dxr[s] += wv * dyr[s + shift];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_weight(const ConvArgs& c, const T* x, const T* dy, T* dw, T* dbias) {
  const auto pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const auto len = static_cast<std::ptrdiff_t>(c.len);
  const auto ks = static_cast<std::ptrdiff_t>(c.ksize);
  const auto c_out = static_cast<std::ptrdiff_t>(c.c_out);
  const bool threaded = c.batch * c.c_out * c.c_in * c.rows * c.len * c.ksize >= kMinParallelWork;
#pragma omp parallel for schedule(static) if (threaded)
  for (std::ptrdiff_t o = 0; o < c_out; ++o) {
    if (dbias) {
      T s = dbias[o];
      for (std::size_t b = 0; b < c.batch; ++b)
        for (std::size_t h = 0; h < c.rows; ++h) {
          const T* dyr = dy + ((b * c.c_out + o) * c.rows + h) * c.len;
          for (std::ptrdiff_t t = 0; t < len; ++t) s += dyr[t];
        }
      dbias[o] = s;
    }
    if (!dw) continue;
    for (std::size_t i = 0; i < c.c_in; ++i) {
      T* dwr = dw + (o * c.c_in + i) * c.ksize;
      for (std::size_t b = 0; b < c.batch; ++b)
        for (std::size_t h = 0; h < c.rows; ++h) {
          const T* dyr = dy + ((b * c.c_out + o) * c.rows + h) * c.len;
          const T* xr = x + ((b * c.c_in + i) * c.rows + h) * c.len;
          for (std::ptrdiff_t t = 0; t < len; ++t) {
            // q such that 0 <= t + q - pad < len
            const std::ptrdiff_t q0 = std::max<std::ptrdiff_t>(0, pad - t);
            const std::ptrdiff_t q1 = std::min<std::ptrdiff_t>(ks, len + pad - t);
            const T g = dyr[t];
            const std::ptrdiff_t base = t - pad;
            for (std::ptrdiff_t q = q0; q < q1; ++q) dwr[q] += g * xr[base + q];
          }
        }
    }
  }
}

#define DEFORMER_INSTANTIATE(T)                                                      \
  template void gemm<T>(const GemmArgs&, const T*, const T*, T*);                    \
  template void conv_forward<T>(const ConvArgs&, const T*, const T*, const T*, T*);  \
  template void conv_backward_input<T>(const ConvArgs&, const T*, const T*, T*);     \
  template void conv_backward_weight<T>(const ConvArgs&, const T*, const T*, T*, T*);
DEFORMER_INSTANTIATE(float)
DEFORMER_INSTANTIATE(double)
#undef DEFORMER_INSTANTIATE

}  // namespace deformer::kernels::parallel
