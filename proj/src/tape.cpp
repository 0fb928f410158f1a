#include "glyphrl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "glyphrl/errors.hpp"
#include "glyphrl/kernels.hpp"

namespace glyphrl {

// ---- Value ----

const Tensor& Value::val() const {
    if (!tape || id < 0) throw IndexError("Value: unbound handle");
    return tape->node_value(id);
}

double Value::scalar() const {
    const Tensor& t = val();
    if (!t.is_scalar()) throw DimensionError("Value::scalar: tensor has shape " + t.shape_str());
    return t.v[0];
}

// ---- ParamStore ----

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (has(name)) throw ConfigError("ParamStore::add: duplicate parameter '" + name + "'");
    index[name] = static_cast<int>(entries.size());
    Entry e;
    e.name = name;
    e.m = Tensor::zeros(init.shape);
    e.v = Tensor::zeros(init.shape);
    e.value = std::move(init);
    entries.push_back(std::move(e));
    return entries.back().value;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("ParamStore::get: unknown parameter '" + name + "'");
    return entries[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("ParamStore::get: unknown parameter '" + name + "'");
    return entries[it->second].value;
}

std::int64_t ParamStore::total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
}

ParamStore ParamStore::clone_values() const {
    ParamStore out;
    for (const auto& e : entries) out.add(e.name, e.value);
    return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
    if (entries.size() != other.entries.size())
        throw ConfigError("ParamStore::copy_values_from: parameter count mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Entry& src = other.entries[i];
        Entry& dst = entries[i];
        if (dst.name != src.name || !dst.value.same_shape(src.value))
            throw ConfigError("ParamStore::copy_values_from: mismatch at '" + dst.name + "'");
        dst.value.v = src.value.v;
    }
}

bool ParamStore::values_equal(const ParamStore& other) const {
    if (entries.size() != other.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].name != other.entries[i].name) return false;
        if (entries[i].value.v != other.entries[i].value.v) return false;
    }
    return true;
}

void adam_step(ParamStore& params, const GradMap& grads, double lr, const AdamConfig& cfg) {
    params.adam_t += 1;
    const double t = static_cast<double>(params.adam_t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& e : params.entries) {
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        if (!g.same_shape(e.value))
            throw DimensionError("adam_step: gradient shape mismatch for '" + e.name + "'");
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const double gi = g.v[i];
            if (!std::isfinite(gi))
                throw NumericError("adam_step: non-finite gradient in '" + e.name + "'");
            e.m.v[i] = cfg.beta1 * e.m.v[i] + (1.0 - cfg.beta1) * gi;
            e.v.v[i] = cfg.beta2 * e.v.v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = e.m.v[i] / bc1;
            const double vhat = e.v.v[i] / bc2;
            e.value.v[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void grad_accumulate(GradMap& into, const GradMap& g, double w) {
    for (const auto& [name, t] : g) {
        auto it = into.find(name);
        if (it == into.end()) {
            Tensor acc = Tensor::zeros(t.shape);
            for (std::int64_t i = 0; i < t.numel(); ++i) acc.v[i] = w * t.v[i];
            into.emplace(name, std::move(acc));
        } else {
            if (!it->second.same_shape(t))
                throw DimensionError("grad_accumulate: shape mismatch for '" + name + "'");
            for (std::int64_t i = 0; i < t.numel(); ++i) it->second.v[i] += w * t.v[i];
        }
    }
}

// ---- Tape ----

Value Tape::emit(Tensor value, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(value);
    n.grad = Tensor::zeros(n.value.shape);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::leaf(Tensor t) { return emit(std::move(t), nullptr); }

Value Tape::param(ParamStore& store, const std::string& name) {
    auto it = leased_.find(name);
    if (it != leased_.end()) return Value{this, it->second};
    Value v = emit(store.get(name), nullptr);
    leased_[name] = v.id;
    return v;
}

void Tape::backward(Value loss) {
    if (loss.tape != this) throw IndexError("Tape::backward: value from another tape");
    if (ran_backward_) throw NumericError("Tape::backward: called twice on one tape");
    const Tensor& lt = node_value(loss.id);
    if (!lt.is_scalar())
        throw DimensionError("Tape::backward: loss must be scalar, got " + lt.shape_str());
    ran_backward_ = true;
    nodes_[loss.id].grad.v[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
        if (nodes_[i].backward) nodes_[i].backward(*this);
}

const Tensor& Tape::grad(Value v) const {
    if (v.tape != this) throw IndexError("Tape::grad: value from another tape");
    if (!ran_backward_) throw NumericError("Tape::grad: backward() has not run");
    return nodes_[v.id].grad;
}

GradMap Tape::param_grads(const ParamStore& store) const {
    if (!ran_backward_) throw NumericError("Tape::param_grads: backward() has not run");
    GradMap out;
    for (const auto& e : store.entries) {
        auto it = leased_.find(e.name);
        if (it == leased_.end())
            out.emplace(e.name, Tensor::zeros(e.value.shape));
        else
            out.emplace(e.name, nodes_[it->second].grad);
    }
    return out;
}

// ---- op helpers ----

namespace {

Tape& same_tape(Value a, Value b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw IndexError(std::string(op) + ": values must come from one tape");
    return *a.tape;
}

Tape& tape_of(Value a, const char* op) {
    if (a.tape == nullptr) throw IndexError(std::string(op) + ": unbound value");
    return *a.tape;
}

void need_same_shape(const Tensor& x, const Tensor& y, const char* op) {
    if (!x.same_shape(y))
        throw DimensionError(std::string(op) + ": shape mismatch " + x.shape_str() + " vs " +
                             y.shape_str());
}

// A vector argument (gain / bias row) may be rank-1 {n} or rank-2 {1,n}.
void need_width(const Tensor& vec, int n, const char* op) {
    if (vec.numel() != n)
        throw DimensionError(std::string(op) + ": vector has " + std::to_string(vec.numel()) +
                             " entries, need " + std::to_string(n));
}

}  // namespace

// ---- elementwise ----

Value add(Value a, Value b) {
    Tape& t = same_tape(a, b, "add");
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    need_same_shape(x, y, "add");
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] += y.v[i];
    const int self = t.size();
    const int ia = a.id, ib = b.id;
    return t.emit(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
        Tensor& gb = tp.node_grad(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
    });
}

Value sub(Value a, Value b) {
    Tape& t = same_tape(a, b, "sub");
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    need_same_shape(x, y, "sub");
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] -= y.v[i];
    const int self = t.size();
    const int ia = a.id, ib = b.id;
    return t.emit(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
        Tensor& gb = tp.node_grad(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] -= g.v[i];
    });
}

Value mul(Value a, Value b) {
    Tape& t = same_tape(a, b, "mul");
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    need_same_shape(x, y, "mul");
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] *= y.v[i];
    const int self = t.size();
    const int ia = a.id, ib = b.id;
    return t.emit(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        const Tensor& y_ = tp.node_value(ib);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * y_.v[i];
        Tensor& gb = tp.node_grad(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i] * x_.v[i];
    });
}

Value scale(Value a, double c) {
    Tape& t = tape_of(a, "scale");
    Tensor out = a.val();
    for (double& x : out.v) x *= c;
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia, c](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += c * g.v[i];
    });
}

Value addc(Value a, double c) {
    Tape& t = tape_of(a, "addc");
    Tensor out = a.val();
    for (double& x : out.v) x += c;
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
    });
}

Value exp_(Value a) {
    Tape& t = tape_of(a, "exp_");
    Tensor out = a.val();
    for (double& x : out.v) x = std::exp(x);
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& y = tp.node_value(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * y.v[i];
    });
}

Value log_(Value a) {
    Tape& t = tape_of(a, "log_");
    Tensor out = a.val();
    for (double& x : out.v) {
        if (!(x > 0.0)) throw NumericError("log_: input not strictly positive");
        x = std::log(x);
    }
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] / x_.v[i];
    });
}

Value min2(Value a, Value b) {
    Tape& t = same_tape(a, b, "min2");
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    need_same_shape(x, y, "min2");
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] = std::min(x.v[i], y.v[i]);
    const int self = t.size();
    const int ia = a.id, ib = b.id;
    return t.emit(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        const Tensor& y_ = tp.node_value(ib);
        Tensor& ga = tp.node_grad(ia);
        Tensor& gb = tp.node_grad(ib);
        // Ties route to the first argument; both branches agree there anyway.
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (x_.v[i] <= y_.v[i])
                ga.v[i] += g.v[i];
            else
                gb.v[i] += g.v[i];
        }
    });
}

Value clamp(Value a, double lo, double hi) {
    if (!(lo <= hi)) throw ConfigError("clamp: lo > hi");
    Tape& t = tape_of(a, "clamp");
    Tensor out = a.val();
    for (double& x : out.v) x = std::min(std::max(x, lo), hi);
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia, lo, hi](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        Tensor& ga = tp.node_grad(ia);
        // Boundary points keep their gradient (subgradient choice).
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (x_.v[i] >= lo && x_.v[i] <= hi) ga.v[i] += g.v[i];
    });
}

Value silu(Value a) {
    Tape& t = tape_of(a, "silu");
    Tensor out = a.val();
    for (double& x : out.v) x = x / (1.0 + std::exp(-x));
    const int self = t.size();
    const int ia = a.id;
    return t.emit(std::move(out), [self, ia](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x_.v[i]));
            ga.v[i] += g.v[i] * s * (1.0 + x_.v[i] * (1.0 - s));
        }
    });
}

// ---- reductions ----

Value sum_all(Value a) {
    Tape& t = tape_of(a, "sum_all");
    double s = 0.0;
    for (double x : a.val().v) s += x;
    const int self = t.size();
    const int ia = a.id;
    return t.emit(Tensor::scalar(s), [self, ia](Tape& tp) {
        const double g = tp.node_grad(self).v[0];
        Tensor& ga = tp.node_grad(ia);
        for (double& x : ga.v) x += g;
    });
}

Value mean_all(Value a) {
    const std::int64_t n = a.val().numel();
    if (n == 0) throw DimensionError("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

// ---- matrix ops ----

Value matmul(Value a, Value b) {
    Tape& t = same_tape(a, b, "matmul");
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    const int m = x.rows(), k = x.cols();
    if (y.rows() != k)
        throw DimensionError("matmul: inner dims " + x.shape_str() + " vs " + y.shape_str());
    const int n = y.cols();
    Tensor out = Tensor::zeros({m, n});
    kernels::matmul(x.v.data(), y.v.data(), out.v.data(), m, k, n);
    const int self = t.size();
    const int ia = a.id, ib = b.id;
    return t.emit(std::move(out), [self, ia, ib, m, k, n](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& x_ = tp.node_value(ia);
        const Tensor& y_ = tp.node_value(ib);
        Tensor tmp_a = Tensor::zeros({m, k});
        kernels::matmul_bt(g.v.data(), y_.v.data(), tmp_a.v.data(), m, n, k);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga.v[i] += tmp_a.v[i];
        Tensor tmp_b = Tensor::zeros({k, n});
        kernels::matmul_at(x_.v.data(), g.v.data(), tmp_b.v.data(), m, k, n);
        Tensor& gb = tp.node_grad(ib);
        for (std::int64_t i = 0; i < gb.numel(); ++i) gb.v[i] += tmp_b.v[i];
    });
}

Value add_rowvec(Value m_, Value row) {
    Tape& t = same_tape(m_, row, "add_rowvec");
    const Tensor& x = m_.val();
    const Tensor& r = row.val();
    const int rows = x.rows(), cols = x.cols();
    need_width(r, cols, "add_rowvec");
    Tensor out = x;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.v[static_cast<std::size_t>(i) * cols + j] += r.v[j];
    const int self = t.size();
    const int ia = m_.id, ib = row.id;
    return t.emit(std::move(out), [self, ia, ib, rows, cols](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
        Tensor& gb = tp.node_grad(ib);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) gb.v[j] += g.v[static_cast<std::size_t>(i) * cols + j];
    });
}

Value rmsnorm_rows(Value x, Value gain, double eps) {
    if (!(eps > 0.0)) throw ConfigError("rmsnorm_rows: eps must be positive");
    Tape& t = same_tape(x, gain, "rmsnorm_rows");
    const Tensor& in = x.val();
    const Tensor& gn = gain.val();
    const int rows = in.rows(), cols = in.cols();
    need_width(gn, cols, "rmsnorm_rows");
    Tensor out = Tensor::zeros({rows, cols});
    kernels::rmsnorm_rows(in.v.data(), gn.v.data(), out.v.data(), rows, cols, eps);
    const int self = t.size();
    const int ix = x.id, ig = gain.id;
    return t.emit(std::move(out), [self, ix, ig, rows, cols, eps](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& in_ = tp.node_value(ix);
        const Tensor& gn_ = tp.node_value(ig);
        Tensor& gx = tp.node_grad(ix);
        Tensor& gg = tp.node_grad(ig);
        for (int r = 0; r < rows; ++r) {
            const double* xr = in_.v.data() + static_cast<std::size_t>(r) * cols;
            const double* gr = g.v.data() + static_cast<std::size_t>(r) * cols;
            double ss = 0.0;
            for (int j = 0; j < cols; ++j) ss += xr[j] * xr[j];
            const double inv = 1.0 / std::sqrt(ss / cols + eps);
            double dot = 0.0;  // sum_j g_j * gain_j * x_j
            for (int j = 0; j < cols; ++j) dot += gr[j] * gn_.v[j] * xr[j];
            const double coef = inv * inv * inv * dot / cols;
            double* gxr = gx.v.data() + static_cast<std::size_t>(r) * cols;
            for (int j = 0; j < cols; ++j) {
                gxr[j] += gr[j] * gn_.v[j] * inv - xr[j] * coef;
                gg.v[j] += gr[j] * xr[j] * inv;
            }
        }
    });
}

Value log_softmax_rows(Value logits) {
    Tape& t = tape_of(logits, "log_softmax_rows");
    const Tensor& in = logits.val();
    const int rows = in.rows(), cols = in.cols();
    Tensor out = Tensor::zeros({rows, cols});
    kernels::log_softmax_rows(in.v.data(), out.v.data(), rows, cols);
    const int self = t.size();
    const int ia = logits.id;
    return t.emit(std::move(out), [self, ia, rows, cols](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& y = tp.node_value(self);
        Tensor& ga = tp.node_grad(ia);
        for (int r = 0; r < rows; ++r) {
            const double* gr = g.v.data() + static_cast<std::size_t>(r) * cols;
            const double* yr = y.v.data() + static_cast<std::size_t>(r) * cols;
            double gsum = 0.0;
            for (int j = 0; j < cols; ++j) gsum += gr[j];
            double* gar = ga.v.data() + static_cast<std::size_t>(r) * cols;
            for (int j = 0; j < cols; ++j) gar[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
    });
}

// ---- indexing ----

Value gather_rows(Value m_, std::vector<int> idx) {
    Tape& t = tape_of(m_, "gather_rows");
    const Tensor& x = m_.val();
    const int rows = x.rows(), cols = x.cols();
    for (int i : idx)
        if (i < 0 || i >= rows) throw IndexError("gather_rows: row index out of range");
    const int n = static_cast<int>(idx.size());
    Tensor out = Tensor::zeros({n, cols});
    for (int i = 0; i < n; ++i)
        std::copy_n(x.v.data() + static_cast<std::size_t>(idx[i]) * cols, cols,
                    out.v.data() + static_cast<std::size_t>(i) * cols);
    const int self = t.size();
    const int ia = m_.id;
    return t.emit(std::move(out), [self, ia, idx = std::move(idx), cols](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* gr = g.v.data() + i * cols;
            double* gar = ga.v.data() + static_cast<std::size_t>(idx[i]) * cols;
            for (int j = 0; j < cols; ++j) gar[j] += gr[j];
        }
    });
}

Value gather_cols(Value m_, std::vector<int> col_per_row) {
    Tape& t = tape_of(m_, "gather_cols");
    const Tensor& x = m_.val();
    const int rows = x.rows(), cols = x.cols();
    if (static_cast<int>(col_per_row.size()) != rows)
        throw DimensionError("gather_cols: need one column index per row");
    for (int c : col_per_row)
        if (c < 0 || c >= cols) throw IndexError("gather_cols: column index out of range");
    Tensor out = Tensor::zeros({rows});
    for (int i = 0; i < rows; ++i) out.v[i] = x.at(i, col_per_row[i]);
    const int self = t.size();
    const int ia = m_.id;
    return t.emit(std::move(out), [self, ia, idx = std::move(col_per_row), cols](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i)
            ga.v[i * cols + static_cast<std::size_t>(idx[i])] += g.v[i];
    });
}

Value mul_rowmask(Value m_, std::vector<double> row_scale) {
    Tape& t = tape_of(m_, "mul_rowmask");
    const Tensor& x = m_.val();
    const int rows = x.rows(), cols = x.cols();
    if (static_cast<int>(row_scale.size()) != rows)
        throw DimensionError("mul_rowmask: need one scale per row");
    Tensor out = x;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.v[static_cast<std::size_t>(i) * cols + j] *= row_scale[i];
    const int self = t.size();
    const int ia = m_.id;
    return t.emit(std::move(out), [self, ia, s = std::move(row_scale), cols](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        Tensor& ga = tp.node_grad(ia);
        for (std::size_t i = 0; i < s.size(); ++i)
            for (int j = 0; j < cols; ++j) ga.v[i * cols + j] += g.v[i * cols + j] * s[i];
    });
}

Value embed_rows(Value table_a, Value table_b, std::vector<int> row_index,
                 std::vector<bool> pick_b) {
    Tape& t = same_tape(table_a, table_b, "embed_rows");
    const Tensor& A = table_a.val();
    const Tensor& B = table_b.val();
    const int cols = A.cols();
    if (B.cols() != cols) throw DimensionError("embed_rows: table widths differ");
    if (row_index.size() != pick_b.size())
        throw DimensionError("embed_rows: row_index/pick_b length mismatch");
    const int n = static_cast<int>(row_index.size());
    Tensor out = Tensor::zeros({n, cols});
    for (int i = 0; i < n; ++i) {
        const Tensor& src = pick_b[i] ? B : A;
        if (row_index[i] < 0 || row_index[i] >= src.rows())
            throw IndexError("embed_rows: row " + std::to_string(row_index[i]) +
                             " outside table of " + std::to_string(src.rows()));
        std::copy_n(src.v.data() + static_cast<std::size_t>(row_index[i]) * cols, cols,
                    out.v.data() + static_cast<std::size_t>(i) * cols);
    }
    const int self = t.size();
    const int ia = table_a.id, ib = table_b.id;
    return t.emit(std::move(out),
                  [self, ia, ib, idx = std::move(row_index), pb = std::move(pick_b), cols](Tape& tp) {
                      const Tensor& g = tp.node_grad(self);
                      Tensor& ga = tp.node_grad(ia);
                      Tensor& gb = tp.node_grad(ib);
                      for (std::size_t i = 0; i < idx.size(); ++i) {
                          Tensor& dst = pb[i] ? gb : ga;
                          double* dr = dst.v.data() + static_cast<std::size_t>(idx[i]) * cols;
                          const double* gr = g.v.data() + i * cols;
                          for (int j = 0; j < cols; ++j) dr[j] += gr[j];
                      }
                  });
}

// ---- attention ----

Value mha_causal(Value q, Value k, Value v, int n_heads) {
    Tape& t = same_tape(q, k, "mha_causal");
    same_tape(q, v, "mha_causal");
    const Tensor& Q = q.val();
    const Tensor& K = k.val();
    const Tensor& V = v.val();
    need_same_shape(Q, K, "mha_causal");
    need_same_shape(Q, V, "mha_causal");
    const int L = Q.rows(), d = Q.cols();
    if (n_heads <= 0 || d % n_heads != 0)
        throw ConfigError("mha_causal: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    const int hd = d / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    // probs[h] is L x L lower-triangular attention weights for head h.
    auto probs = std::make_shared<std::vector<Tensor>>();
    probs->reserve(n_heads);
    Tensor out = Tensor::zeros({L, d});
    std::vector<double> srow(static_cast<std::size_t>(L));
    for (int h = 0; h < n_heads; ++h) {
        Tensor P = Tensor::zeros({L, L});
        const int off = h * hd;
        for (int i = 0; i < L; ++i) {
            double mx = -1e300;
            for (int j = 0; j <= i; ++j) {
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += Q.at(i, off + c) * K.at(j, off + c);
                s *= sc;
                srow[j] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int j = 0; j <= i; ++j) {
                srow[j] = std::exp(srow[j] - mx);
                denom += srow[j];
            }
            for (int j = 0; j <= i; ++j) {
                const double p = srow[j] / denom;
                P.at(i, j) = p;
                for (int c = 0; c < hd; ++c) out.at(i, off + c) += p * V.at(j, off + c);
            }
        }
        probs->push_back(std::move(P));
    }

    const int self = t.size();
    const int iq = q.id, ik = k.id, iv = v.id;
    return t.emit(std::move(out), [self, iq, ik, iv, n_heads, L, hd, sc, probs](Tape& tp) {
        const Tensor& g = tp.node_grad(self);
        const Tensor& Q_ = tp.node_value(iq);
        const Tensor& K_ = tp.node_value(ik);
        const Tensor& V_ = tp.node_value(iv);
        Tensor& gq = tp.node_grad(iq);
        Tensor& gk = tp.node_grad(ik);
        Tensor& gv = tp.node_grad(iv);
        std::vector<double> dp(static_cast<std::size_t>(L));
        for (int h = 0; h < n_heads; ++h) {
            const Tensor& P = (*probs)[h];
            const int off = h * hd;
            for (int i = 0; i < L; ++i) {
                // dP_ij = gO_i . V_j ; dS = P o (dP - sum_j dP*P)
                double pdsum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += g.at(i, off + c) * V_.at(j, off + c);
                    dp[j] = s;
                    pdsum += s * P.at(i, j);
                }
                for (int j = 0; j <= i; ++j) {
                    const double p = P.at(i, j);
                    const double ds = p * (dp[j] - pdsum);
                    for (int c = 0; c < hd; ++c) {
                        gq.at(i, off + c) += ds * K_.at(j, off + c) * sc;
                        gk.at(j, off + c) += ds * Q_.at(i, off + c) * sc;
                        gv.at(j, off + c) += p * g.at(i, off + c);
                    }
                }
            }
        }
    });
}

Value rope_rows(Value x, std::vector<int> positions, int n_heads, double base) {
    Tape& t = tape_of(x, "rope_rows");
    const Tensor& in = x.val();
    const int rows = in.rows(), d = in.cols();
    if (static_cast<int>(positions.size()) != rows)
        throw DimensionError("rope_rows: need one position per row");
    if (n_heads <= 0 || d % n_heads != 0)
        throw ConfigError("rope_rows: width not divisible by heads");
    const int hd = d / n_heads;
    if (hd % 2 != 0) throw ConfigError("rope_rows: head width must be even");
    for (int p : positions)
        if (p < 0) throw IndexError("rope_rows: negative position");

    // Frequencies per rotating pair within a head.
    std::vector<double> freq(static_cast<std::size_t>(hd / 2));
    for (int p = 0; p < hd / 2; ++p)
        freq[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));

    Tensor out = in;
    for (int r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            for (int p = 0; p < hd / 2; ++p) {
                const double ang = pos * freq[p];
                const double c = std::cos(ang), s = std::sin(ang);
                const double a0 = in.at(r, off + 2 * p), a1 = in.at(r, off + 2 * p + 1);
                out.at(r, off + 2 * p) = a0 * c - a1 * s;
                out.at(r, off + 2 * p + 1) = a0 * s + a1 * c;
            }
        }
    }
    const int self = t.size();
    const int ia = x.id;
    return t.emit(std::move(out),
                  [self, ia, pos = std::move(positions), n_heads, hd, freq](Tape& tp) {
                      const Tensor& g = tp.node_grad(self);
                      Tensor& ga = tp.node_grad(ia);
                      const int rows = g.rows();
                      for (int r = 0; r < rows; ++r) {
                          const double p_ = static_cast<double>(pos[r]);
                          for (int h = 0; h < n_heads; ++h) {
                              const int off = h * hd;
                              for (int p = 0; p < hd / 2; ++p) {
                                  const double ang = p_ * freq[p];
                                  const double c = std::cos(ang), s = std::sin(ang);
                                  const double g0 = g.at(r, off + 2 * p);
                                  const double g1 = g.at(r, off + 2 * p + 1);
                                  // Rotation is orthogonal: backward applies the transpose.
                                  ga.at(r, off + 2 * p) += g0 * c + g1 * s;
                                  ga.at(r, off + 2 * p + 1) += -g0 * s + g1 * c;
                              }
                          }
                      }
                  });
}

// ---- losses ----

Value nll_sum(Value logprobs, std::vector<int> targets) {
    Tape& t = tape_of(logprobs, "nll_sum");
    const Tensor& lp = logprobs.val();
    const int rows = lp.rows(), cols = lp.cols();
    if (static_cast<int>(targets.size()) != rows)
        throw DimensionError("nll_sum: need one target per row");
    double s = 0.0;
    for (int i = 0; i < rows; ++i) {
        if (targets[i] < 0 || targets[i] >= cols)
            throw IndexError("nll_sum: target " + std::to_string(targets[i]) +
                             " outside width " + std::to_string(cols));
        s -= lp.at(i, targets[i]);
    }
    const int self = t.size();
    const int ia = logprobs.id;
    return t.emit(Tensor::scalar(s), [self, ia, tg = std::move(targets), cols](Tape& tp) {
        const double g = tp.node_grad(self).v[0];
        Tensor& ga = tp.node_grad(ia);
        for (std::size_t i = 0; i < tg.size(); ++i)
            ga.v[i * cols + static_cast<std::size_t>(tg[i])] -= g;
    });
}

MaskedCe cross_entropy_masked(Value logprobs, const std::vector<int>& targets,
                              const std::vector<bool>& mask) {
    Tape& t = tape_of(logprobs, "cross_entropy_masked");
    const Tensor& lp = logprobs.val();
    const int rows = lp.rows(), cols = lp.cols();
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows)
        throw DimensionError("cross_entropy_masked: targets/mask must match row count");
    int count = 0;
    double s = 0.0;
    for (int i = 0; i < rows; ++i) {
        if (!mask[i]) continue;  // masked-out rows may carry sentinel targets
        if (targets[i] < 0 || targets[i] >= cols)
            throw IndexError("cross_entropy_masked: target " + std::to_string(targets[i]) +
                             " outside width " + std::to_string(cols));
        s -= lp.at(i, targets[i]);
        ++count;
    }
    if (count == 0) return MaskedCe{t.leaf(Tensor::scalar(0.0)), true};
    const double invc = 1.0 / static_cast<double>(count);
    const int self = t.size();
    const int ia = logprobs.id;
    Value loss =
        t.emit(Tensor::scalar(s * invc), [self, ia, tg = targets, mk = mask, cols, invc](Tape& tp) {
            const double g = tp.node_grad(self).v[0];
            Tensor& ga = tp.node_grad(ia);
            for (std::size_t i = 0; i < tg.size(); ++i)
                if (mk[i]) ga.v[i * cols + static_cast<std::size_t>(tg[i])] -= g * invc;
        });
    return MaskedCe{loss, false};
}

Tensor log_softmax_tensor(const Tensor& logits) {
    Tensor out = Tensor::zeros({logits.rows(), logits.cols()});
    kernels::log_softmax_rows(logits.v.data(), out.v.data(), logits.rows(), logits.cols());
    return out;
}

}  // namespace glyphrl
