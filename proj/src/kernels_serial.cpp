#include <algorithm>

#include "deformer/kernels.hpp"

namespace deformer::kernels {

namespace {
Backend g_backend = Backend::kParallel;
}

void set_backend(Backend b) { g_backend = b; }
Backend backend() { return g_backend; }

namespace serial {

template <typename T>
void gemm(const GemmArgs& g, const T* a, const T* b, T* c) {
  const std::size_t c_count = g.c_batch == 0 ? g.m * g.n : g.batch * g.m * g.n;
  if (!g.accumulate) std::fill(c, c + c_count, T{0});
  for (std::size_t bi = 0; bi < g.batch; ++bi) {
    const T* ab = a + bi * g.a_batch;
    const T* bb = b + bi * g.b_batch;
    T* cb = c + bi * g.c_batch;
    for (std::size_t i = 0; i < g.m; ++i) {
      for (std::size_t j = 0; j < g.n; ++j) {
        T s = cb[i * g.n + j];
        for (std::size_t p = 0; p < g.k; ++p) {
          s += ab[i * g.a_row + p * g.a_col] * bb[p * g.b_row + j * g.b_col];
        }
        cb[i * g.n + j] = s;
      }
    }
  }
}

template <typename T>
void conv_forward(const ConvArgs& c, const T* x, const T* w, const T* bias, T* y) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(c.len);
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t o = 0; o < c.c_out; ++o)
      for (std::size_t h = 0; h < c.rows; ++h)
        for (std::ptrdiff_t t = 0; t < len; ++t) {
          T s = bias ? bias[o] : T{0};
          for (std::size_t i = 0; i < c.c_in; ++i) {
            const T* xr = x + ((b * c.c_in + i) * c.rows + h) * c.len;
            const T* wr = w + (o * c.c_in + i) * c.ksize;
            for (std::size_t q = 0; q < c.ksize; ++q) {
              const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(q) - pad;
              if (src >= 0 && src < len) s += wr[q] * xr[src];
            }
          }
          y[((b * c.c_out + o) * c.rows + h) * c.len + t] = s;
        }
}

template <typename T>
void conv_backward_input(const ConvArgs& c, const T* w, const T* dy, T* dx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(c.len);
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t i = 0; i < c.c_in; ++i)
      for (std::size_t h = 0; h < c.rows; ++h)
        for (std::ptrdiff_t s = 0; s < len; ++s) {
          T& acc = dx[((b * c.c_in + i) * c.rows + h) * c.len + s];
          T v = acc;
          for (std::size_t o = 0; o < c.c_out; ++o) {
            const T* dyr = dy + ((b * c.c_out + o) * c.rows + h) * c.len;
            const T* wr = w + (o * c.c_in + i) * c.ksize;
            for (std::size_t q = 0; q < c.ksize; ++q) {
              const std::ptrdiff_t t = s - static_cast<std::ptrdiff_t>(q) + pad;
              if (t >= 0 && t < len) v += wr[q] * dyr[t];
            }
          }
          acc = v;
        }
}

template <typename T>
void conv_backward_weight(const ConvArgs& c, const T* x, const T* dy, T* dw, T* dbias) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(c.ksize / 2);
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(c.len);
  for (std::size_t o = 0; o < c.c_out; ++o) {
    if (dbias) {
      T s = dbias[o];
      for (std::size_t b = 0; b < c.batch; ++b)
        for (std::size_t h = 0; h < c.rows; ++h)
          for (std::ptrdiff_t t = 0; t < len; ++t) s += dy[((b * c.c_out + o) * c.rows + h) * c.len + t];
      dbias[o] = s;
    }
    if (!dw) continue;
    for (std::size_t i = 0; i < c.c_in; ++i)
      for (std::size_t q = 0; q < c.ksize; ++q) {
        T s = dw[(o * c.c_in + i) * c.ksize + q];
        for (std::size_t b = 0; b < c.batch; ++b)
          for (std::size_t h = 0; h < c.rows; ++h) {
            const T* dyr = dy + ((b * c.c_out + o) * c.rows + h) * c.len;
            const T* xr = x + ((b * c.c_in + i) * c.rows + h) * c.len;
            for (std::ptrdiff_t t = 0; t < len; ++t) {
              const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(q) - pad;
              if (src >= 0 && src < len) s += dyr[t] * xr[src];
            }
          }
        dw[(o * c.c_in + i) * c.ksize + q] = s;
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

}  // namespace serial
}  // namespace deformer::kernels
