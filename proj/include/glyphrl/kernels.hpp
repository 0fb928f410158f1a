#pragma once

#include <cstddef>

namespace glyphrl::kernels {

// Dense kernels in two variants each: a plain serial reference and an
// OpenMP version parallelized over independent output elements. Both
// compute every output element with the same inner reduction order, so
// results are bit-identical regardless of thread count. Tests assert
// exact equality; tools/bench_kernels.cpp compares throughput.

// c[m x n] = a[m x k] * b[k x n], c overwritten.
void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n);
void matmul(const double* a, const double* b, double* c, int m, int k, int n);

// c[m x n] = a[m x k] * b[n x k]^T  (b given row-major with rows as output
// columns; the layout used by projection heads).
void matmul_bt_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_bt_omp(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_bt(const double* a, const double* b, double* c, int m, int k, int n);

// c[k x n] = a[m x k]^T * b[m x n]  (reduction over the shared row index;
// the gradient-side counterpart of matmul).
void matmul_at_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_at_omp(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_at(const double* a, const double* b, double* c, int m, int k, int n);

// Row-wise log-softmax with max-subtraction, out may alias in.
void log_softmax_rows_serial(const double* in, double* out, int rows, int cols);
void log_softmax_rows_omp(const double* in, double* out, int rows, int cols);
void log_softmax_rows(const double* in, double* out, int rows, int cols);

// Row-wise RMS normalization: out[r,:] = in[r,:] / rms(in[r,:]) * gain[:].
void rmsnorm_rows_serial(const double* in, const double* gain, double* out, int rows, int cols,
                         double eps);
void rmsnorm_rows_omp(const double* in, const double* gain, double* out, int rows, int cols,
                      double eps);
void rmsnorm_rows(const double* in, const double* gain, double* out, int rows, int cols, double eps);

// Work threshold below which the dispatching wrappers stay serial.
inline constexpr long kParallelThreshold = 64 * 1024;

}  // namespace glyphrl::kernels
