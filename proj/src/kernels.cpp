#include "glyphrl/kernels.hpp"

#include <cmath>
#include <cstring>

namespace glyphrl::kernels {

// i-k-j loops: the k reduction for each c[i,j] runs in a fixed order and the
// j loop vectorizes over contiguous rows of b.
void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        std::memset(ci, 0, sizeof(double) * n);
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        std::memset(ci, 0, sizeof(double) * n);
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (work >= kParallelThreshold)
        matmul_omp(a, b, c, m, k, n);
    else
        matmul_serial(a, b, c, m, k, n);
}

void matmul_bt_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] = s;
        }
    }
}

void matmul_bt_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] = s;
        }
    }
}

void matmul_bt(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (work >= kParallelThreshold)
        matmul_bt_omp(a, b, c, m, k, n);
    else
        matmul_bt_serial(a, b, c, m, k, n);
}

void matmul_at_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int r = 0; r < k; ++r) {
        double* cr = c + static_cast<std::size_t>(r) * n;
        std::memset(cr, 0, sizeof(double) * n);
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<std::size_t>(i) * k + r];
            const double* bi = b + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * bi[j];
        }
    }
}

void matmul_at_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < k; ++r) {
        double* cr = c + static_cast<std::size_t>(r) * n;
        std::memset(cr, 0, sizeof(double) * n);
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<std::size_t>(i) * k + r];
            const double* bi = b + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * bi[j];
        }
    }
}

void matmul_at(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (work >= kParallelThreshold)
        matmul_at_omp(a, b, c, m, k, n);
    else
        matmul_at_serial(a, b, c, m, k, n);
}

static inline void log_softmax_one_row(const double* in, double* out, int cols) {
    double mx = in[0];
    for (int j = 1; j < cols; ++j)
        if (in[j] > mx) mx = in[j];
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += std::exp(in[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < cols; ++j) out[j] = in[j] - lse;
}

void log_softmax_rows_serial(const double* in, double* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r)
        log_softmax_one_row(in + static_cast<std::size_t>(r) * cols,
                            out + static_cast<std::size_t>(r) * cols, cols);
}

void log_softmax_rows_omp(const double* in, double* out, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r)
        log_softmax_one_row(in + static_cast<std::size_t>(r) * cols,
                            out + static_cast<std::size_t>(r) * cols, cols);
}

void log_softmax_rows(const double* in, double* out, int rows, int cols) {
    if (static_cast<long>(rows) * cols >= kParallelThreshold)
        log_softmax_rows_omp(in, out, rows, cols);
    else
        log_softmax_rows_serial(in, out, rows, cols);
}

static inline void rmsnorm_one_row(const double* in, const double* gain, double* out, int cols,
                                   double eps) {
    double ss = 0.0;
    for (int j = 0; j < cols; ++j) ss += in[j] * in[j];
    const double inv = 1.0 / std::sqrt(ss / cols + eps);
    for (int j = 0; j < cols; ++j) out[j] = in[j] * inv * gain[j];
}

void rmsnorm_rows_serial(const double* in, const double* gain, double* out, int rows, int cols,
                         double eps) {
    for (int r = 0; r < rows; ++r)
        rmsnorm_one_row(in + static_cast<std::size_t>(r) * cols, gain,
                        out + static_cast<std::size_t>(r) * cols, cols, eps);
}

void rmsnorm_rows_omp(const double* in, const double* gain, double* out, int rows, int cols,
                      double eps) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r)
        rmsnorm_one_row(in + static_cast<std::size_t>(r) * cols, gain,
                        out + static_cast<std::size_t>(r) * cols, cols, eps);
}

void rmsnorm_rows(const double* in, const double* gain, double* out, int rows, int cols,
                  double eps) {
    if (static_cast<long>(rows) * cols >= kParallelThreshold)
        rmsnorm_rows_omp(in, gain, out, rows, cols, eps);
    else
        rmsnorm_rows_serial(in, gain, out, rows, cols, eps);
}

}  // namespace glyphrl::kernels
