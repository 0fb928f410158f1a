#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "glyphrl/codec.hpp"
#include "glyphrl/rng.hpp"
#include "glyphrl/tape.hpp"

namespace glyphrl {

struct PolicyConfig {
    int embed_dim = 32;
    int n_heads = 4;
    int n_core_blocks = 4;
    int n_vision_pre = 1;   // vision blocks ahead of the core stack
    int n_vision_post = 1;  // and after it
    int ffn_mult = 4;
    int max_seq_len = 64;
    bool predict_eom = false;  // false: grids terminate at h*w codes
    std::uint64_t seed = 1;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    void validate() const;
    int head_dim() const { return embed_dim / n_heads; }
    int n_blocks() const { return n_vision_pre + n_core_blocks + n_vision_post; }
    // Vision blocks update hidden states at image positions only.
    bool is_vision_block(int i) const {
        return i < n_vision_pre || i >= n_vision_pre + n_core_blocks;
    }
    bool operator==(const PolicyConfig&) const = default;
};

// Autoregressive transformer over the multimodal token universe. Text tokens
// and the six specials share one embedding table and output head; image codes
// get their own table and head. Rollout-phase entry points are const (shared
// reads); entry points that lease parameters onto a tape or update them
// require the exclusive mutable reference.
class PolicyModel {
public:
    PolicyModel(PolicyConfig cfg, VocabLayout vocab);        // seeded random init
    static PolicyModel zero_init(PolicyConfig cfg, VocabLayout vocab);

    const PolicyConfig& config() const { return cfg_; }
    const VocabLayout& vocab() const { return vocab_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    int text_head_width() const { return vocab_.n_text + 6; }
    int image_head_width() const { return vocab_.n_image + (cfg_.predict_eom ? 1 : 0); }
    int eom_image_slot() const;  // image-head slot of EOM (predict_eom only)
    // Row index of a text-head token (text or special), or image table row.
    int text_head_index(Token t) const;
    int image_head_index(Token t) const;

    PolicyModel clone() const;

    // Tape forward: hidden states after the final norm, one row per input
    // token. Vision-block updates are gated to image-token rows.
    Value forward_hidden(Tape& t, const TokenSeq& input);
    // Log-softmax rows of the selected head at the given hidden rows.
    Value image_logprobs_at(Tape& t, Value hidden, const std::vector<int>& rows);
    Value text_logprobs_at(Tape& t, Value hidden, const std::vector<int>& rows);

private:
    PolicyModel() = default;
    void init_params(bool zero);

    PolicyConfig cfg_;
    VocabLayout vocab_;
    ParamStore params_;

    friend class PolicyRunner;
};

// Incremental evaluator with per-block KV caches; used for sampling and
// log-prob evaluation. Arithmetic matches the tape forward exactly.
class PolicyRunner {
public:
    explicit PolicyRunner(const PolicyModel& m);
    void reset();
    int length() const { return len_; }
    void push(Token t);
    // Raw logits (pre-softmax) for the next position under each head.
    Tensor text_logits() const;
    Tensor image_logits() const;

private:
    const PolicyModel* m_;
    int len_ = 0;
    std::vector<std::vector<double>> k_cache_;  // per block, len*d
    std::vector<std::vector<double>> v_cache_;
    std::vector<double> last_x_;  // hidden of last pushed token, pre final norm
};

// Per-position logits with the head chosen from the sequence structure:
// image head exactly where the next token sits inside an image span.
struct PositionLogits {
    bool image_head = false;
    Tensor logits;
};
std::vector<PositionLogits> forward_logits(PolicyModel& m, const TokenSeq& seq);

struct SeqLogprob {
    double sum = 0.0;
    std::vector<double> per_pos;  // logprob of seq[i] for each masked-in i
    std::vector<int> positions;
};
// Exact log-probs of the masked-in tokens under the model (teacher forcing).
SeqLogprob sequence_logprob(const PolicyModel& m, const TokenSeq& seq,
                            const std::vector<bool>& mask);

struct SamplerConfig {
    double temperature = 1.0;
    int top_k = 0;          // 0 disables truncation
    double cfg_scale = 1.0; // 1 = pure conditional (guidance off)
    std::uint64_t seed = 0;
};

struct SampleResult {
    CodeGrid grid;   // filled when completed
    TokenSeq seq;    // full wire sequence actually produced
    std::vector<double> code_logprobs;  // conditional logprob per emitted code
    double logprob_sum = 0.0;
    bool completed = true;  // false when predict_eom ends the span early
};

// Samples h*w image codes after the forced prompt/dims prefix. Guidance
// mixes logits as uncond + s*(cond - uncond), where the unconditional pass
// replaces the prompt with a single PAD token; s==1 runs only the
// conditional pass and is bit-identical to guidance-free sampling. Reported
// logprobs are always under the conditional temperature-1 distribution (the
// quantity RL consumes).
SampleResult sample_grid(const PolicyModel& m, const TokenSeq& prompt, int h, int w,
                         const SamplerConfig& sc);

struct SftItem {
    TokenSeq seq;
    std::vector<bool> mask;  // true at supervised target positions
    std::string id;
};

struct SftReport {
    double loss = 0.0;  // pre-step mean nats per supervised token
    int token_count = 0;
};

// One optimizer step on masked cross-entropy over the batch (per-token mean).
SftReport sft_step(PolicyModel& m, const std::vector<SftItem>& batch, double lr);

void save_checkpoint(const PolicyModel& m, const std::string& path);
// expect != nullptr enforces a config match (rejects otherwise).
PolicyModel load_checkpoint(const std::string& path, const PolicyConfig* expect = nullptr);

}  // namespace glyphrl
