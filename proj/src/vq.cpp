#include "glyphrl/vq.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"

namespace glyphrl {

namespace {

double sqdist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

}  // namespace

int quantize(const Codebook& cb, const double* x, int d) {
    if (d != cb.d)
        throw DimensionError("quantize: query dim " + std::to_string(d) + " vs codebook dim " +
                             std::to_string(cb.d));
    if (cb.k <= 0) throw ConfigError("quantize: empty codebook");
    for (int i = 0; i < d; ++i)
        if (!std::isfinite(x[i])) throw NumericError("quantize: non-finite query entry");
    int best = 0;
    double best_d = sqdist(x, cb.row(0), d);
    for (int c = 1; c < cb.k; ++c) {
        const double dd = sqdist(x, cb.row(c), d);
        if (dd < best_d) {  // strict: ties keep the lowest index
            best_d = dd;
            best = c;
        }
    }
    return best;
}

int quantize(const Codebook& cb, const std::vector<double>& x) {
    return quantize(cb, x.data(), static_cast<int>(x.size()));
}

double codebook_objective(const Codebook& cb, const Tensor& features) {
    const int n = features.rows(), d = features.cols();
    if (d != cb.d) throw DimensionError("codebook_objective: dim mismatch");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* x = features.v.data() + static_cast<std::size_t>(i) * d;
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < cb.k; ++c) best = std::min(best, sqdist(x, cb.row(c), d));
        total += best;
    }
    return total;
}

Codebook fit_codebook(const Tensor& features, int k, int iters, std::uint64_t seed,
                      KmeansTrace* trace) {
    const int n = features.rows(), d = features.cols();
    if (k < 1) throw ConfigError("fit_codebook: k must be positive");
    if (n < k)
        throw ConfigError("fit_codebook: " + std::to_string(n) + " points for k=" +
                          std::to_string(k));
    if (iters < 0) throw ConfigError("fit_codebook: negative iteration count");
    check_finite(features, "fit_codebook features");

    const auto point = [&](int i) { return features.v.data() + static_cast<std::size_t>(i) * d; };

    Codebook cb;
    cb.k = k;
    cb.d = d;
    cb.vectors.assign(static_cast<std::size_t>(k) * d, 0.0);

    // k-means++ seeding: first center uniform, the rest sampled with
    // probability proportional to squared distance from the chosen set.
    Rng rng = Rng::stream(seed, {0x6b6d6e73ULL});
    std::vector<double> d2(static_cast<std::size_t>(n));
    {
        const int first = rng.uniform_int(n);
        std::memcpy(cb.vectors.data(), point(first), sizeof(double) * d);
        for (int i = 0; i < n; ++i) d2[i] = sqdist(point(i), cb.row(0), d);
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (int i = 0; i < n; ++i) total += d2[i];
            int pick = -1;
            if (total > 0.0) {
                const double u = rng.uniform01() * total;
                double acc = 0.0;
                for (int i = 0; i < n; ++i) {
                    acc += d2[i];
                    if (acc > u) {
                        pick = i;
                        break;
                    }
                }
                if (pick < 0) pick = n - 1;  // guard against rounding at u ~ total
            } else {
                // All points coincide with chosen centers; take them in order.
                pick = c % n;
            }
            std::memcpy(cb.vectors.data() + static_cast<std::size_t>(c) * d, point(pick),
                        sizeof(double) * d);
            for (int i = 0; i < n; ++i) d2[i] = std::min(d2[i], sqdist(point(i), cb.row(c), d));
        }
    }

    std::vector<int> assign(static_cast<std::size_t>(n));
    std::vector<double> sums(static_cast<std::size_t>(k) * d);
    std::vector<int> counts(static_cast<std::size_t>(k));
    if (trace) trace->objective.clear();

    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) assign[i] = quantize(cb, point(i), d);

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < n; ++i) {
            counts[assign[i]] += 1;
            double* s = sums.data() + static_cast<std::size_t>(assign[i]) * d;
            const double* x = point(i);
            for (int j = 0; j < d; ++j) s[j] += x[j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            double* row = cb.vectors.data() + static_cast<std::size_t>(c) * d;
            const double* s = sums.data() + static_cast<std::size_t>(c) * d;
            for (int j = 0; j < d; ++j) row[j] = s[j] / counts[c];
        }
        // Re-seed empty clusters from the point farthest from its center.
        for (int c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                const double dd = sqdist(point(i), cb.row(assign[i]), d);
                if (dd > far_d) {
                    far_d = dd;
                    far = i;
                }
            }
            std::memcpy(cb.vectors.data() + static_cast<std::size_t>(c) * d, point(far),
                        sizeof(double) * d);
            counts[c] = 1;
            assign[far] = c;
        }
        if (trace) trace->objective.push_back(codebook_objective(cb, features));
    }
    return cb;
}

namespace {

constexpr char kMagic[8] = {'G', 'L', 'R', 'L', 'C', 'D', 'B', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_codebook(const Codebook& cb, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_codebook: cannot open '" + path + "'");
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t ver = kVersion, k = static_cast<std::uint32_t>(cb.k),
                        d = static_cast<std::uint32_t>(cb.d);
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    f.write(reinterpret_cast<const char*>(&k), sizeof(k));
    f.write(reinterpret_cast<const char*>(&d), sizeof(d));
    f.write(reinterpret_cast<const char*>(cb.vectors.data()),
            static_cast<std::streamsize>(cb.vectors.size() * sizeof(double)));
    if (!f) throw IoError("save_codebook: write failed for '" + path + "'");
}

Codebook load_codebook(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_codebook: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("load_codebook: '" + path + "' is not a codebook file");
    std::uint32_t ver = 0, k = 0, d = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    f.read(reinterpret_cast<char*>(&k), sizeof(k));
    f.read(reinterpret_cast<char*>(&d), sizeof(d));
    if (!f || ver != kVersion)
        throw IoError("load_codebook: unsupported version in '" + path + "'");
    if (k == 0 || d == 0 || k > (1u << 20) || d > (1u << 20))
        throw IoError("load_codebook: implausible header in '" + path + "'");
    Codebook cb;
    cb.k = static_cast<int>(k);
    cb.d = static_cast<int>(d);
    cb.vectors.resize(static_cast<std::size_t>(k) * d);
    f.read(reinterpret_cast<char*>(cb.vectors.data()),
           static_cast<std::streamsize>(cb.vectors.size() * sizeof(double)));
    if (!f) throw IoError("load_codebook: truncated file '" + path + "'");
    for (double x : cb.vectors)
        if (!std::isfinite(x)) throw IoError("load_codebook: non-finite entry in '" + path + "'");
    return cb;
}

}  // namespace glyphrl
