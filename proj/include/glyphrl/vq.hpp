#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "glyphrl/tensor.hpp"

namespace glyphrl {

// Nearest-neighbor vector quantizer codebook: K rows of dimension d.
struct Codebook {
    int k = 0;
    int d = 0;
    std::vector<double> vectors;  // k*d row-major

    const double* row(int i) const { return vectors.data() + static_cast<std::size_t>(i) * d; }
};

struct KmeansTrace {
    std::vector<double> objective;  // total squared distance after each iteration
};

// k-means with k-means++ seeding. Empty clusters are re-seeded from the point
// farthest from its nearest center. Deterministic for a fixed seed.
Codebook fit_codebook(const Tensor& features, int k, int iters, std::uint64_t seed,
                      KmeansTrace* trace = nullptr);

// Index of the nearest codebook row by squared Euclidean distance;
// ties resolve to the lowest index.
int quantize(const Codebook& cb, const double* x, int d);
int quantize(const Codebook& cb, const std::vector<double>& x);

double codebook_objective(const Codebook& cb, const Tensor& features);

void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

}  // namespace glyphrl
