#include "glyphrl/tensor.hpp"

#include <cmath>
#include <sstream>

#include "glyphrl/errors.hpp"

namespace glyphrl {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(v.size()))
        throw DimensionError("tensor value count does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(static_cast<std::size_t>(shape_numel(t.shape)), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> s, double value) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(std::vector<int> s, double std, Rng& rng) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = std * rng.normal();
    return t;
}

int Tensor::rows() const {
    if (shape.size() != 2) throw DimensionError("rows() on non-2D tensor " + shape_str());
    return shape[0];
}

int Tensor::cols() const {
    if (shape.size() != 2) throw DimensionError("cols() on non-2D tensor " + shape_str());
    return shape[1];
}

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void check_finite(const Tensor& t, const char* where) {
    if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite values");
}

}  // namespace glyphrl
