#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "glyphrl/kernels.hpp"
#include "glyphrl/rng.hpp"

namespace {

using namespace glyphrl;

double seconds(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

std::vector<double> randvec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

void row(const char* name, int m, int k, int n, double serial_s, double omp_s, bool equal) {
    std::printf("%-16s %4dx%4dx%4d  serial %9.3f ms  omp %9.3f ms  speedup %5.2fx  %s\n", name, m,
                k, n, serial_s * 1e3, omp_s * 1e3, serial_s / omp_s,
                equal ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
    Rng rng(42);
    std::printf("kernel benchmark: serial reference vs OpenMP variant\n\n");
    for (const int size : {64, 128, 256, 512}) {
        const int m = size, k = size, n = size;
        const std::vector<double> a = randvec(static_cast<std::size_t>(m) * k, rng);
        const std::vector<double> b = randvec(static_cast<std::size_t>(k) * n, rng);
        std::vector<double> c1(static_cast<std::size_t>(m) * n), c2(c1.size());
        const int reps = size <= 128 ? 20 : 5;

        const double ts = seconds([&] { kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n); }, reps);
        const double tp = seconds([&] { kernels::matmul_omp(a.data(), b.data(), c2.data(), m, k, n); }, reps);
        row("matmul", m, k, n, ts, tp, c1 == c2);

        const double ts2 = seconds([&] { kernels::matmul_bt_serial(a.data(), b.data(), c1.data(), m, k, n); }, reps);
        const double tp2 = seconds([&] { kernels::matmul_bt_omp(a.data(), b.data(), c2.data(), m, k, n); }, reps);
        row("matmul_bt", m, k, n, ts2, tp2, c1 == c2);

        const double ts3 = seconds([&] { kernels::matmul_at_serial(a.data(), b.data(), c1.data(), m, k, n); }, reps);
        const double tp3 = seconds([&] { kernels::matmul_at_omp(a.data(), b.data(), c2.data(), m, k, n); }, reps);
        row("matmul_at", m, k, n, ts3, tp3, c1 == c2);
    }
    for (const int rows_n : {256, 1024, 4096}) {
        const int cols = 256;
        const std::vector<double> x = randvec(static_cast<std::size_t>(rows_n) * cols, rng);
        const std::vector<double> g = randvec(static_cast<std::size_t>(cols), rng);
        std::vector<double> o1(x.size()), o2(x.size());
        const double ts = seconds([&] { kernels::log_softmax_rows_serial(x.data(), o1.data(), rows_n, cols); }, 20);
        const double tp = seconds([&] { kernels::log_softmax_rows_omp(x.data(), o2.data(), rows_n, cols); }, 20);
        row("log_softmax", rows_n, cols, 0, ts, tp, o1 == o2);
        const double ts2 = seconds([&] { kernels::rmsnorm_rows_serial(x.data(), g.data(), o1.data(), rows_n, cols, 1e-5); }, 20);
        const double tp2 = seconds([&] { kernels::rmsnorm_rows_omp(x.data(), g.data(), o2.data(), rows_n, cols, 1e-5); }, 20);
        row("rmsnorm", rows_n, cols, 0, ts2, tp2, o1 == o2);
    }
    return 0;
}
