#include "glyphrl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"

namespace glyphrl {

double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
    return std::fabs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Value(Tape&, ParamStore&)>& f, ParamStore& params,
                           double fd_eps, double tol, int max_coords_per_param,
                           std::uint64_t sample_seed) {
    if (!(fd_eps > 0.0)) throw ConfigError("grad_check: fd_eps must be positive");
    if (!(tol > 0.0)) throw ConfigError("grad_check: tol must be positive");

    GradMap analytic;
    {
        Tape tape;
        Value loss = f(tape, params);
        if (!loss.val().is_scalar()) throw DimensionError("grad_check: f must return a scalar");
        tape.backward(loss);
        analytic = tape.param_grads(params);
    }

    auto eval = [&]() -> double {
        Tape tape;
        return f(tape, params).scalar();
    };

    GradCheckReport rep;
    Rng rng = Rng::stream(sample_seed, {0x67726164ULL});
    for (auto& entry : params.entries) {
        Tensor& value = entry.value;
        const Tensor& g = analytic.at(entry.name);
        std::vector<std::int64_t> coords(static_cast<std::size_t>(value.numel()));
        std::iota(coords.begin(), coords.end(), 0);
        if (max_coords_per_param > 0 &&
            value.numel() > static_cast<std::int64_t>(max_coords_per_param)) {
            // Partial Fisher-Yates: first max_coords entries become the sample.
            for (int i = 0; i < max_coords_per_param; ++i) {
                const int j = i + rng.uniform_int(static_cast<int>(coords.size()) - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(static_cast<std::size_t>(max_coords_per_param));
        }
        for (std::int64_t ci : coords) {
            const double saved = value.v[ci];
            value.v[ci] = saved + fd_eps;
            const double up = eval();
            value.v[ci] = saved - fd_eps;
            const double dn = eval();
            value.v[ci] = saved;
            const double numeric = (up - dn) / (2.0 * fd_eps);
            const double err = rel_err(g.v[ci], numeric);
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_param = entry.name;
                rep.worst_index = ci;
                rep.worst_analytic = g.v[ci];
                rep.worst_numeric = numeric;
            }
        }
    }
    rep.pass = rep.checked > 0 && rep.max_rel_err <= tol;
    return rep;
}

}  // namespace glyphrl
