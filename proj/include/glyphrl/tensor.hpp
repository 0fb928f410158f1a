#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "glyphrl/rng.hpp"

namespace glyphrl {

// Dense row-major 64-bit float tensor. Rank is arbitrary but all engine ops
// work on rank 1/2; there is no broadcasting beyond what the policy needs.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> values);

    static Tensor zeros(std::vector<int> s);
    static Tensor full(std::vector<int> s, double value);
    static Tensor scalar(double value);
    static Tensor randn(std::vector<int> s, double std, Rng& rng);

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    bool is_scalar() const { return v.size() == 1; }

    // 2-D accessors.
    int rows() const;
    int cols() const;
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;
};

std::int64_t shape_numel(const std::vector<int>& shape);

// Throws NumericError when any entry is non-finite.
void check_finite(const Tensor& t, const char* where);

}  // namespace glyphrl
