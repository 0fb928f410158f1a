#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "glyphrl/tape.hpp"

namespace glyphrl {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::int64_t checked = 0;
    bool pass = false;
};

// Relative error with a floor so near-zero gradients compare sanely.
double rel_err(double analytic, double numeric);

// Verifies tape gradients of a scalar function against central finite
// differences. `f` must rebuild its graph from `params` on every call (it is
// re-evaluated with perturbed parameter values). With
// max_coords_per_param > 0 only a seeded subsample of coordinates per
// parameter is probed; 0 checks every coordinate.
GradCheckReport grad_check(const std::function<Value(Tape&, ParamStore&)>& f, ParamStore& params,
                           double fd_eps, double tol, int max_coords_per_param = 0,
                           std::uint64_t sample_seed = 1);

}  // namespace glyphrl
