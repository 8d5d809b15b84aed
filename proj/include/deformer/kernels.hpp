#pragma once

#include <cstddef>

// Dense compute kernels behind the differentiable ops. Each kernel exists in
// two builds: `serial` is the plain reference loop nest, `parallel` is the
// OpenMP version used for training. Both accumulate every output element in
// the same order, so they agree bitwise and the threaded result does not
// depend on the thread count.

namespace deformer::kernels {

enum class Backend { kSerial, kParallel };

void set_backend(Backend backend);
Backend backend();

class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : previous_(backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

/// Strided batched matrix product C[b] (+)= A[b] * B[b].
///
/// Element (i, p) of A in batch b lives at a[b*a_batch + i*a_row + p*a_col],
/// likewise for B with (p, j). C is row-major m x n. A batch stride of 0
/// broadcasts that operand; c_batch == 0 sums every batch into one C.
/// Per element the order is: initial value, then b ascending, p ascending.
struct GemmArgs {
  std::size_t batch = 1, m = 0, n = 0, k = 0;
  std::size_t a_batch = 0, a_row = 0, a_col = 1;
  std::size_t b_batch = 0, b_row = 0, b_col = 1;
  std::size_t c_batch = 0;
  bool accumulate = false;
};

/// "Same"-padded correlation along the last axis, applied independently to
/// every row: x [batch, c_in, rows, len], w [c_out, c_in, ksize],
/// y [batch, c_out, rows, len]. ksize is odd; pad = (ksize-1)/2.
struct ConvArgs {
  std::size_t batch = 1, c_in = 1, c_out = 1, rows = 1, len = 0, ksize = 1;
};

namespace serial {
template <typename T>
void gemm(const GemmArgs& g, const T* a, const T* b, T* c);
/// y = bias + w (*) x
template <typename T>
void conv_forward(const ConvArgs& c, const T* x, const T* w, const T* bias, T* y);
/// dx += w^T (*) dy
template <typename T>
void conv_backward_input(const ConvArgs& c, const T* w, const T* dy, T* dx);
/// dw += dy (*) x, dbias += sum(dy); either output may be null.
template <typename T>
void conv_backward_weight(const ConvArgs& c, const T* x, const T* dy, T* dw, T* dbias);
}  // namespace serial

namespace parallel {
template <typename T>
void gemm(const GemmArgs& g, const T* a, const T* b, T* c);
template <typename T>
void conv_forward(const ConvArgs& c, const T* x, const T* w, const T* bias, T* y);
template <typename T>
void conv_backward_input(const ConvArgs& c, const T* w, const T* dy, T* dx);
template <typename T>
void conv_backward_weight(const ConvArgs& c, const T* x, const T* dy, T* dw, T* dbias);
}  // namespace parallel

// Dispatch on the active backend.
template <typename T>
void gemm(const GemmArgs& g, const T* a, const T* b, T* c) {
  backend() == Backend::kSerial ? serial::gemm(g, a, b, c) : parallel::gemm(g, a, b, c);
}
template <typename T>
void conv_forward(const ConvArgs& c, const T* x, const T* w, const T* bias, T* y) {
  backend() == Backend::kSerial ? serial::conv_forward(c, x, w, bias, y)
                                : parallel::conv_forward(c, x, w, bias, y);
}
template <typename T>
void conv_backward_input(const ConvArgs& c, const T* w, const T* dy, T* dx) {
  backend() == Backend::kSerial ? serial::conv_backward_input(c, w, dy, dx)
                                : parallel::conv_backward_input(c, w, dy, dx);
}
template <typename T>
void conv_backward_weight(const ConvArgs& c, const T* x, const T* dy, T* dw, T* dbias) {
  backend() == Backend::kSerial ? serial::conv_backward_weight(c, x, dy, dw, dbias)
                                : parallel::conv_backward_weight(c, x, dy, dw, dbias);
}

}  // namespace deformer::kernels
