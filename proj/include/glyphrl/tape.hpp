#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "glyphrl/tensor.hpp"

namespace glyphrl {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& val() const;
    double scalar() const;
};

// Gradients keyed by parameter name. std::map keeps accumulation order
// deterministic.
using GradMap = std::map<std::string, Tensor>;

// Named parameter tensors plus Adam moments. The registry that tapes lease
// leaves from.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        Tensor m;
        Tensor v;
    };

    std::vector<Entry> entries;
    std::map<std::string, int> index;
    std::int64_t adam_t = 0;

    Tensor& add(const std::string& name, Tensor init);
    bool has(const std::string& name) const { return index.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    std::int64_t total_params() const;

    // Copy of values only; optimizer state starts fresh.
    ParamStore clone_values() const;
    // Overwrite values from another store with identical names/shapes.
    void copy_values_from(const ParamStore& other);
    bool values_equal(const ParamStore& other) const;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

void adam_step(ParamStore& params, const GradMap& grads, double lr, const AdamConfig& cfg = {});

// into += w * g for every named gradient.
void grad_accumulate(GradMap& into, const GradMap& g, double w);

// Reverse-mode tape. Forward ops append nodes; backward() replays the
// recorded backward rules in exact reverse order of the forward pass.
class Tape {
public:
    Value leaf(Tensor t);
    // Lease a parameter as a leaf; repeated leases return the same node.
    Value param(ParamStore& store, const std::string& name);

    void backward(Value loss);

    const Tensor& node_value(int id) const { return nodes_[id].value; }
    Tensor& node_grad(int id) { return nodes_[id].grad; }
    const Tensor& grad(Value v) const;

    // One gradient tensor per parameter in `store`; zeros for parameters the
    // tape never touched.
    GradMap param_grads(const ParamStore& store) const;

    int size() const { return static_cast<int>(nodes_.size()); }
    Value emit(Tensor value, std::function<void(Tape&)> bw);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> backward;
    };
    std::vector<Node> nodes_;
    std::map<std::string, int> leased_;
    bool ran_backward_ = false;
};

// ---- primitive ops ----

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value a, double c);
Value addc(Value a, double c);
Value matmul(Value a, Value b);
Value add_rowvec(Value m, Value row);
Value rmsnorm_rows(Value x, Value gain, double eps);
Value silu(Value x);
Value log_softmax_rows(Value logits);
Value exp_(Value x);
Value log_(Value x);
Value min2(Value a, Value b);
Value clamp(Value x, double lo, double hi);
Value sum_all(Value x);
Value mean_all(Value x);
Value gather_rows(Value m, std::vector<int> idx);
Value gather_cols(Value m, std::vector<int> col_per_row);
Value mul_rowmask(Value m, std::vector<double> row_scale);

// Fused causal multi-head attention. q,k,v are [L x d]; d split into
// n_heads contiguous chunks. Softmax over keys <= query position, scaled by
// 1/sqrt(head_dim).
Value mha_causal(Value q, Value k, Value v, int n_heads);

// out[i,:] = (pick_b[i] ? table_b : table_a).row(row_index[i]); gradients
// scatter back into both tables. The dual-embedding lookup.
Value embed_rows(Value table_a, Value table_b, std::vector<int> row_index,
                 std::vector<bool> pick_b);

// 1D rotary embedding applied per head to column pairs; positions gives the
// absolute position of each row.
Value rope_rows(Value x, std::vector<int> positions, int n_heads, double base = 10000.0);

// -sum_i logprobs[i, targets[i]]  (targets checked against width).
Value nll_sum(Value logprobs, std::vector<int> targets);

struct MaskedCe {
    Value loss;
    bool empty_mask = false;  // all-false mask: loss defined as 0, flagged
};

// Mean NLL over masked-in rows of a log-probability matrix.
MaskedCe cross_entropy_masked(Value logprobs, const std::vector<int>& targets,
                              const std::vector<bool>& mask);

// Non-tape helper mirroring the kernel: numerically stabilized row log-softmax.
Tensor log_softmax_tensor(const Tensor& logits);

}  // namespace glyphrl
