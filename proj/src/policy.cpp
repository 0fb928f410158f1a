#include "glyphrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "glyphrl/errors.hpp"
#include "glyphrl/kernels.hpp"

namespace glyphrl {

// ---- config ----

void PolicyConfig::validate() const {
    if (embed_dim <= 0 || n_heads <= 0) throw ConfigError("policy: embed_dim/n_heads must be positive");
    if (embed_dim % n_heads != 0)
        throw ConfigError("policy: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    if (head_dim() % 2 != 0)
        throw ConfigError("policy: head dim " + std::to_string(head_dim()) +
                          " must be even for rotary embedding");
    if (n_core_blocks < 1) throw ConfigError("policy: need at least one core block");
    if (n_vision_pre < 0 || n_vision_post < 0) throw ConfigError("policy: negative vision block count");
    if (ffn_mult < 1) throw ConfigError("policy: ffn_mult must be >= 1");
    if (max_seq_len < 4) throw ConfigError("policy: max_seq_len too small");
    if (!(norm_eps > 0.0)) throw ConfigError("policy: norm_eps must be positive");
    if (!(rope_base > 1.0)) throw ConfigError("policy: rope_base must exceed 1");
}

// ---- model ----

PolicyModel::PolicyModel(PolicyConfig cfg, VocabLayout vocab)
    : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.validate();
    init_params(false);
}

PolicyModel PolicyModel::zero_init(PolicyConfig cfg, VocabLayout vocab) {
    PolicyModel m;
    m.cfg_ = cfg;
    m.vocab_ = std::move(vocab);
    m.cfg_.validate();
    m.init_params(true);
    return m;
}

void PolicyModel::init_params(bool zero) {
    const int d = cfg_.embed_dim;
    const int f = cfg_.ffn_mult * d;
    Rng rng = Rng::stream(cfg_.seed, {0x706f6c69ULL});
    const double sd = 0.02;
    auto mat = [&](std::vector<int> shape) {
        return zero ? Tensor::zeros(shape) : Tensor::randn(std::move(shape), sd, rng);
    };
    auto gain = [&](int n) { return zero ? Tensor::zeros({n}) : Tensor::full({n}, 1.0); };

    params_.add("tok_emb_text", mat({text_head_width(), d}));
    params_.add("tok_emb_image", mat({vocab_.n_image, d}));
    for (int b = 0; b < cfg_.n_blocks(); ++b) {
        const std::string p = "blk" + std::to_string(b) + ".";
        params_.add(p + "attn.wq", mat({d, d}));
        params_.add(p + "attn.wk", mat({d, d}));
        params_.add(p + "attn.wv", mat({d, d}));
        params_.add(p + "attn.wo", mat({d, d}));
        params_.add(p + "ln1.g", gain(d));
        params_.add(p + "ffn.w1", mat({d, f}));
        params_.add(p + "ffn.w2", mat({f, d}));
        params_.add(p + "ln2.g", gain(d));
    }
    params_.add("ln_f.g", gain(d));
    params_.add("head_text.w", mat({d, text_head_width()}));
    params_.add("head_img.w", mat({d, image_head_width()}));
}

int PolicyModel::eom_image_slot() const {
    if (!cfg_.predict_eom) throw ConfigError("eom_image_slot: predict_eom is off");
    return vocab_.n_image;
}

int PolicyModel::text_head_index(Token t) const {
    if (vocab_.is_text(t)) return t;
    if (vocab_.is_special(t)) return vocab_.n_text + (t - vocab_.n_text - vocab_.n_image);
    throw RangeError("text_head_index: token " + std::to_string(t) + " not text/special");
}

int PolicyModel::image_head_index(Token t) const {
    if (vocab_.is_image(t)) return vocab_.image_code(t);
    if (cfg_.predict_eom && t == vocab_.eom) return eom_image_slot();
    throw RangeError("image_head_index: token " + std::to_string(t) + " not an image target");
}

PolicyModel PolicyModel::clone() const {
    PolicyModel m;
    m.cfg_ = cfg_;
    m.vocab_ = vocab_;
    m.params_ = params_.clone_values();
    return m;
}

Value PolicyModel::forward_hidden(Tape& t, const TokenSeq& input) {
    const int L = static_cast<int>(input.size());
    if (L < 1) throw DimensionError("forward_hidden: empty input");
    if (L > cfg_.max_seq_len)
        throw RangeError("forward_hidden: length " + std::to_string(L) + " exceeds max " +
                         std::to_string(cfg_.max_seq_len));
    std::vector<int> row_index(static_cast<std::size_t>(L));
    std::vector<bool> pick_image(static_cast<std::size_t>(L));
    std::vector<double> gate(static_cast<std::size_t>(L));
    std::vector<int> positions(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
        const Token tok = input[i];
        const TokenClass c = vocab_.token_class(tok);  // throws on bad ids
        pick_image[i] = c == TokenClass::Image;
        row_index[i] = pick_image[i] ? vocab_.image_code(tok) : text_head_index(tok);
        gate[i] = pick_image[i] ? 1.0 : 0.0;
        positions[i] = i;
    }

    Value x = embed_rows(t.param(params_, "tok_emb_text"), t.param(params_, "tok_emb_image"),
                         row_index, pick_image);
    for (int b = 0; b < cfg_.n_blocks(); ++b) {
        const std::string p = "blk" + std::to_string(b) + ".";
        const bool vision = cfg_.is_vision_block(b);
        Value xn = rmsnorm_rows(x, t.param(params_, p + "ln1.g"), cfg_.norm_eps);
        Value q = rope_rows(matmul(xn, t.param(params_, p + "attn.wq")), positions, cfg_.n_heads,
                            cfg_.rope_base);
        Value k = rope_rows(matmul(xn, t.param(params_, p + "attn.wk")), positions, cfg_.n_heads,
                            cfg_.rope_base);
        Value v = matmul(xn, t.param(params_, p + "attn.wv"));
        Value o = matmul(mha_causal(q, k, v, cfg_.n_heads), t.param(params_, p + "attn.wo"));
        if (vision) o = mul_rowmask(o, gate);
        x = add(x, o);
        Value xn2 = rmsnorm_rows(x, t.param(params_, p + "ln2.g"), cfg_.norm_eps);
        Value h = matmul(silu(matmul(xn2, t.param(params_, p + "ffn.w1"))),
                         t.param(params_, p + "ffn.w2"));
        if (vision) h = mul_rowmask(h, gate);
        x = add(x, h);
    }
    return rmsnorm_rows(x, t.param(params_, "ln_f.g"), cfg_.norm_eps);
}

Value PolicyModel::image_logprobs_at(Tape& t, Value hidden, const std::vector<int>& rows) {
    return log_softmax_rows(matmul(gather_rows(hidden, rows), t.param(params_, "head_img.w")));
}

Value PolicyModel::text_logprobs_at(Tape& t, Value hidden, const std::vector<int>& rows) {
    return log_softmax_rows(matmul(gather_rows(hidden, rows), t.param(params_, "head_text.w")));
}

// ---- incremental runner ----
// Every arithmetic step mirrors the tape ops (same kernels, same accumulation
// order), so the two forward paths agree to the last bit.

namespace {

void rope_rotate_row(double* x, int pos, int n_heads, int hd, double base) {
    for (int h = 0; h < n_heads; ++h) {
        const int off = h * hd;
        for (int p = 0; p < hd / 2; ++p) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
            const double ang = static_cast<double>(pos) * freq;
            const double c = std::cos(ang), s = std::sin(ang);
            const double a0 = x[off + 2 * p], a1 = x[off + 2 * p + 1];
            x[off + 2 * p] = a0 * c - a1 * s;
            x[off + 2 * p + 1] = a0 * s + a1 * c;
        }
    }
}

}  // namespace

PolicyRunner::PolicyRunner(const PolicyModel& m) : m_(&m) { reset(); }

void PolicyRunner::reset() {
    const int nb = m_->config().n_blocks();
    k_cache_.assign(static_cast<std::size_t>(nb), {});
    v_cache_.assign(static_cast<std::size_t>(nb), {});
    last_x_.assign(static_cast<std::size_t>(m_->config().embed_dim), 0.0);
    len_ = 0;
}

void PolicyRunner::push(Token tok) {
    const PolicyConfig& cfg = m_->config();
    const VocabLayout& vb = m_->vocab();
    if (len_ >= cfg.max_seq_len)
        throw RangeError("PolicyRunner: sequence exceeds max length " +
                         std::to_string(cfg.max_seq_len));
    const int d = cfg.embed_dim;
    const int hd = cfg.head_dim();
    const int f = cfg.ffn_mult * d;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    const ParamStore& ps = m_->params();
    const int pos = len_;

    const TokenClass tc = vb.token_class(tok);
    const bool is_img = tc == TokenClass::Image;
    const double gate = is_img ? 1.0 : 0.0;
    const Tensor& table = is_img ? ps.get("tok_emb_image") : ps.get("tok_emb_text");
    const int row = is_img ? vb.image_code(tok) : m_->text_head_index(tok);

    std::vector<double> x(table.v.data() + static_cast<std::size_t>(row) * d,
                          table.v.data() + static_cast<std::size_t>(row + 1) * d);
    std::vector<double> xn(static_cast<std::size_t>(d));
    std::vector<double> q(static_cast<std::size_t>(d)), k(static_cast<std::size_t>(d)),
        v(static_cast<std::size_t>(d)), o(static_cast<std::size_t>(d)),
        upd(static_cast<std::size_t>(d));
    std::vector<double> h1(static_cast<std::size_t>(f));
    std::vector<double> srow(static_cast<std::size_t>(pos + 1));

    for (int b = 0; b < cfg.n_blocks(); ++b) {
        const std::string p = "blk" + std::to_string(b) + ".";
        const bool vision = cfg.is_vision_block(b);
        kernels::rmsnorm_rows(x.data(), ps.get(p + "ln1.g").v.data(), xn.data(), 1, d,
                              cfg.norm_eps);
        kernels::matmul(xn.data(), ps.get(p + "attn.wq").v.data(), q.data(), 1, d, d);
        kernels::matmul(xn.data(), ps.get(p + "attn.wk").v.data(), k.data(), 1, d, d);
        kernels::matmul(xn.data(), ps.get(p + "attn.wv").v.data(), v.data(), 1, d, d);
        rope_rotate_row(q.data(), pos, cfg.n_heads, hd, cfg.rope_base);
        rope_rotate_row(k.data(), pos, cfg.n_heads, hd, cfg.rope_base);
        auto& kc = k_cache_[b];
        auto& vc = v_cache_[b];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());

        std::fill(o.begin(), o.end(), 0.0);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int off = h * hd;
            double mx = -1e300;
            for (int j = 0; j <= pos; ++j) {
                double s = 0.0;
                const double* kj = kc.data() + static_cast<std::size_t>(j) * d + off;
                for (int c = 0; c < hd; ++c) s += q[off + c] * kj[c];
                s *= sc;
                srow[j] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int j = 0; j <= pos; ++j) {
                srow[j] = std::exp(srow[j] - mx);
                denom += srow[j];
            }
            for (int j = 0; j <= pos; ++j) {
                const double pw = srow[j] / denom;
                const double* vj = vc.data() + static_cast<std::size_t>(j) * d + off;
                for (int c = 0; c < hd; ++c) o[off + c] += pw * vj[c];
            }
        }
        kernels::matmul(o.data(), ps.get(p + "attn.wo").v.data(), upd.data(), 1, d, d);
        if (vision)
            for (int i = 0; i < d; ++i) x[i] += gate * upd[i];
        else
            for (int i = 0; i < d; ++i) x[i] += upd[i];

        kernels::rmsnorm_rows(x.data(), ps.get(p + "ln2.g").v.data(), xn.data(), 1, d,
                              cfg.norm_eps);
        kernels::matmul(xn.data(), ps.get(p + "ffn.w1").v.data(), h1.data(), 1, d, f);
        for (int i = 0; i < f; ++i) h1[i] = h1[i] / (1.0 + std::exp(-h1[i]));
        kernels::matmul(h1.data(), ps.get(p + "ffn.w2").v.data(), upd.data(), 1, f, d);
        if (vision)
            for (int i = 0; i < d; ++i) x[i] += gate * upd[i];
        else
            for (int i = 0; i < d; ++i) x[i] += upd[i];
    }
    last_x_ = x;
    ++len_;
}

namespace {

Tensor head_logits(const PolicyModel& m, const std::vector<double>& last_x, const char* head) {
    if (last_x.empty()) throw IndexError("PolicyRunner: no tokens pushed");
    const int d = m.config().embed_dim;
    const Tensor& w = m.params().get(head);
    std::vector<double> xn(static_cast<std::size_t>(d));
    kernels::rmsnorm_rows(last_x.data(), m.params().get("ln_f.g").v.data(), xn.data(), 1, d,
                          m.config().norm_eps);
    Tensor out = Tensor::zeros({1, w.cols()});
    kernels::matmul(xn.data(), w.v.data(), out.v.data(), 1, d, w.cols());
    return out;
}

}  // namespace

Tensor PolicyRunner::text_logits() const {
    if (len_ == 0) throw IndexError("text_logits: no tokens pushed");
    return head_logits(*m_, last_x_, "head_text.w");
}

Tensor PolicyRunner::image_logits() const {
    if (len_ == 0) throw IndexError("image_logits: no tokens pushed");
    return head_logits(*m_, last_x_, "head_img.w");
}

// ---- whole-sequence logits ----

std::vector<PositionLogits> forward_logits(PolicyModel& m, const TokenSeq& seq) {
    const VocabLayout& vb = m.vocab();
    const int L = static_cast<int>(seq.size());
    // Head schedule: image head exactly where the next position sits inside
    // an image span (codes, plus EOM when it is model-predicted).
    std::vector<bool> image_head(static_cast<std::size_t>(L), false);
    if (std::find(seq.begin(), seq.end(), vb.som) != seq.end()) {
        const ExtractResult ex = extract_grid(seq, vb);
        const std::size_t first_code = ex.img_pos + 1;
        for (int i = 0; i < L; ++i) {
            const std::size_t next = static_cast<std::size_t>(i) + 1;
            bool img = next >= first_code && next < first_code + ex.grid.codes.size();
            if (m.config().predict_eom && next == ex.eom_pos) img = true;
            image_head[i] = img;
        }
    }
    Tape t;
    Value hidden = m.forward_hidden(t, seq);
    std::vector<int> all_rows(static_cast<std::size_t>(L));
    std::iota(all_rows.begin(), all_rows.end(), 0);
    const Tensor img_logits =
        matmul(hidden, t.param(m.params(), "head_img.w")).val();
    const Tensor txt_logits =
        matmul(hidden, t.param(m.params(), "head_text.w")).val();
    std::vector<PositionLogits> out(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
        const Tensor& src = image_head[i] ? img_logits : txt_logits;
        out[i].image_head = image_head[i];
        out[i].logits = Tensor::zeros({1, src.cols()});
        std::copy_n(src.v.data() + static_cast<std::size_t>(i) * src.cols(), src.cols(),
                    out[i].logits.v.data());
    }
    return out;
}

// ---- sequence log-prob ----

SeqLogprob sequence_logprob(const PolicyModel& m, const TokenSeq& seq,
                            const std::vector<bool>& mask) {
    if (mask.size() != seq.size())
        throw DimensionError("sequence_logprob: mask length mismatch");
    if (!mask.empty() && mask[0])
        throw DimensionError("sequence_logprob: position 0 has no predictive context");
    const VocabLayout& vb = m.vocab();
    SeqLogprob out;
    PolicyRunner run(m);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i > 0 && mask[i]) {
            const Token target = seq[i];
            Tensor lp;
            int slot;
            if (vb.is_image(target) || (m.config().predict_eom && target == vb.eom)) {
                lp = log_softmax_tensor(run.image_logits());
                slot = m.image_head_index(target);
            } else {
                lp = log_softmax_tensor(run.text_logits());
                slot = m.text_head_index(target);
            }
            out.per_pos.push_back(lp.v[static_cast<std::size_t>(slot)]);
            out.positions.push_back(static_cast<int>(i));
            out.sum += lp.v[static_cast<std::size_t>(slot)];
        }
        if (i + 1 == seq.size()) break;
        run.push(seq[i]);
    }
    return out;
}

// ---- sampling ----

namespace {

// Keep the top_k largest logits (ties by lower index); the rest drop to -inf.
void apply_top_k(Tensor& logits, int top_k) {
    const int n = logits.cols();
    if (top_k <= 0 || top_k >= n) return;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](int a, int b) {
        if (logits.v[a] != logits.v[b]) return logits.v[a] > logits.v[b];
        return a < b;
    });
    std::vector<bool> keep(static_cast<std::size_t>(n), false);
    for (int i = 0; i < top_k; ++i) keep[order[i]] = true;
    for (int i = 0; i < n; ++i)
        if (!keep[i]) logits.v[i] = -1e300;
}

int sample_index(const Tensor& logprobs, Rng& rng) {
    const int n = logprobs.cols();
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += std::exp(logprobs.v[i]);
    const double u = rng.uniform01() * total;
    double acc = 0.0;
    int last_alive = 0;
    for (int i = 0; i < n; ++i) {
        const double p = std::exp(logprobs.v[i]);
        if (p > 0.0) last_alive = i;
        acc += p;
        if (acc > u) return i;
    }
    return last_alive;
}

}  // namespace

SampleResult sample_grid(const PolicyModel& m, const TokenSeq& prompt, int h, int w,
                         const SamplerConfig& sc) {
    const VocabLayout& vb = m.vocab();
    if (!(sc.temperature > 0.0)) throw ConfigError("sample_grid: temperature must be positive");
    if (sc.top_k < 0 || sc.top_k > m.image_head_width())
        throw ConfigError("sample_grid: top_k outside [0, head width]");
    if (!(sc.cfg_scale >= 0.0)) throw ConfigError("sample_grid: cfg_scale must be >= 0");

    const TokenSeq prefix = span_prefix(prompt, h, w, vb);
    const int n_codes = h * w;
    if (static_cast<int>(prefix.size()) + n_codes + 1 > m.config().max_seq_len)
        throw RangeError("sample_grid: sequence would exceed max length");

    const bool guided = sc.cfg_scale != 1.0;
    PolicyRunner cond(m);
    for (Token t : prefix) cond.push(t);
    PolicyRunner uncond(m);
    if (guided) {
        // Null prompt: a single PAD token in place of the prompt.
        const TokenSeq null_prefix = span_prefix({vb.pad}, h, w, vb);
        for (Token t : null_prefix) uncond.push(t);
    }

    Rng rng = Rng::stream(sc.seed, {0x73616d70ULL});
    SampleResult out;
    out.seq = prefix;
    out.grid.h = h;
    out.grid.w = w;

    const bool has_eom_slot = m.config().predict_eom;
    for (int step = 0; step < n_codes; ++step) {
        const Tensor zc = cond.image_logits();
        Tensor z = zc;
        if (guided) {
            const Tensor zu = uncond.image_logits();
            for (int i = 0; i < z.cols(); ++i)
                z.v[i] = zu.v[i] + sc.cfg_scale * (zc.v[i] - zu.v[i]);
        }
        if (sc.temperature != 1.0)
            for (double& x : z.v) x /= sc.temperature;
        apply_top_k(z, sc.top_k);
        const Tensor lp = log_softmax_tensor(z);
        const int idx = sample_index(lp, rng);

        // RL consumes the conditional temperature-1 log-prob of the pick.
        const Tensor lpc = log_softmax_tensor(zc);
        out.code_logprobs.push_back(lpc.v[static_cast<std::size_t>(idx)]);
        out.logprob_sum += lpc.v[static_cast<std::size_t>(idx)];

        if (has_eom_slot && idx == m.eom_image_slot()) {
            out.seq.push_back(vb.eom);
            out.completed = false;
            out.grid = CodeGrid{};
            return out;
        }
        const Token tok = vb.image_token(idx);
        out.seq.push_back(tok);
        out.grid.codes.push_back(idx);
        cond.push(tok);
        if (guided) uncond.push(tok);
    }
    out.seq.push_back(vb.eom);
    return out;
}

// ---- supervised step ----

SftReport sft_step(PolicyModel& m, const std::vector<SftItem>& batch, double lr) {
    if (batch.empty()) throw ConfigError("sft_step: empty batch");
    const VocabLayout& vb = m.vocab();
    const int n = static_cast<int>(batch.size());
    for (const SftItem& item : batch) {
        if (item.seq.size() < 2)
            throw DimensionError("sft_step: item '" + item.id + "' too short to supervise");
        if (item.mask.size() != item.seq.size())
            throw DimensionError("sft_step: mask length mismatch in item '" + item.id + "'");
    }
    std::vector<GradMap> grads(static_cast<std::size_t>(n));
    std::vector<double> sums(static_cast<std::size_t>(n), 0.0);
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    std::vector<std::string> errors(static_cast<std::size_t>(n));

    // Per-item tapes run in parallel; the reduction below is serial and in
    // index order, so results do not depend on thread count.
#pragma omp parallel for schedule(static)
    for (int bi = 0; bi < n; ++bi) {
        try {
            const SftItem& item = batch[bi];
            const TokenSeq input(item.seq.begin(), item.seq.end() - 1);
            std::vector<int> img_rows, img_tgts, txt_rows, txt_tgts;
            for (std::size_t i = 1; i < item.seq.size(); ++i) {
                if (!item.mask[i]) continue;
                const Token tgt = item.seq[i];
                if (vb.is_image(tgt) || (m.config().predict_eom && tgt == vb.eom)) {
                    img_rows.push_back(static_cast<int>(i) - 1);
                    img_tgts.push_back(m.image_head_index(tgt));
                } else {
                    txt_rows.push_back(static_cast<int>(i) - 1);
                    txt_tgts.push_back(m.text_head_index(tgt));
                }
            }
            const int cnt = static_cast<int>(img_rows.size() + txt_rows.size());
            counts[bi] = cnt;
            if (cnt == 0) continue;
            Tape t;
            Value hidden = m.forward_hidden(t, input);
            Value total;
            bool have = false;
            if (!img_rows.empty()) {
                total = nll_sum(m.image_logprobs_at(t, hidden, img_rows), img_tgts);
                have = true;
            }
            if (!txt_rows.empty()) {
                Value tl = nll_sum(m.text_logprobs_at(t, hidden, txt_rows), txt_tgts);
                total = have ? add(total, tl) : tl;
                have = true;
            }
            sums[bi] = total.scalar();
            t.backward(total);
            grads[bi] = t.param_grads(m.params());
        } catch (const std::exception& e) {
            errors[bi] = e.what();
            sums[bi] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    for (int bi = 0; bi < n; ++bi)
        if (!errors[bi].empty())
            throw NumericError("sft_step: item '" + batch[bi].id + "' failed: " + errors[bi]);

    double loss_sum = 0.0;
    int token_count = 0;
    std::string bad;
    for (int bi = 0; bi < n; ++bi) {
        if (!std::isfinite(sums[bi])) bad += (bad.empty() ? "" : ", ") + batch[bi].id;
        loss_sum += sums[bi];
        token_count += counts[bi];
    }
    if (!bad.empty()) throw NumericError("sft_step: non-finite loss in batch items: " + bad);
    if (token_count == 0) throw ConfigError("sft_step: batch has no supervised tokens");

    GradMap total;
    for (int bi = 0; bi < n; ++bi)
        if (counts[bi] > 0) grad_accumulate(total, grads[bi], 1.0);
    const double inv = 1.0 / static_cast<double>(token_count);
    for (auto& [name, g] : total)
        for (double& x : g.v) x *= inv;
    adam_step(m.params(), total, lr);
    return SftReport{loss_sum * inv, token_count};
}

// ---- checkpoints ----

namespace {

constexpr char kCkptMagic[8] = {'G', 'L', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ofstream& f, const T& x) {
    f.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <typename T>
T take(std::ifstream& f, const char* what) {
    T x{};
    f.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!f) throw IoError(std::string("load_checkpoint: truncated reading ") + what);
    return x;
}

}  // namespace

void save_checkpoint(const PolicyModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open '" + path + "'");
    f.write(kCkptMagic, sizeof(kCkptMagic));
    put(f, kCkptVersion);
    const PolicyConfig& c = m.config();
    put<std::int32_t>(f, c.embed_dim);
    put<std::int32_t>(f, c.n_heads);
    put<std::int32_t>(f, c.n_core_blocks);
    put<std::int32_t>(f, c.n_vision_pre);
    put<std::int32_t>(f, c.n_vision_post);
    put<std::int32_t>(f, c.ffn_mult);
    put<std::int32_t>(f, c.max_seq_len);
    put<std::uint8_t>(f, c.predict_eom ? 1 : 0);
    put<std::uint64_t>(f, c.seed);
    put(f, c.rope_base);
    put(f, c.norm_eps);
    const VocabLayout& v = m.vocab();
    put<std::int32_t>(f, v.n_text);
    put<std::int32_t>(f, v.n_image);
    put<std::int32_t>(f, v.max_grid);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(m.params().entries.size()));
    for (const auto& e : m.params().entries) {
        put<std::uint32_t>(f, static_cast<std::uint32_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint32_t>(f, static_cast<std::uint32_t>(e.value.shape.size()));
        for (int dim : e.value.shape) put<std::int32_t>(f, dim);
        f.write(reinterpret_cast<const char*>(e.value.v.data()),
                static_cast<std::streamsize>(e.value.v.size() * sizeof(double)));
    }
    if (!f) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

PolicyModel load_checkpoint(const std::string& path, const PolicyConfig* expect) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0)
        throw IoError("load_checkpoint: '" + path + "' is not a checkpoint");
    if (take<std::uint32_t>(f, "version") != kCkptVersion)
        throw IoError("load_checkpoint: unsupported version");
    PolicyConfig c;
    c.embed_dim = take<std::int32_t>(f, "embed_dim");
    c.n_heads = take<std::int32_t>(f, "n_heads");
    c.n_core_blocks = take<std::int32_t>(f, "n_core_blocks");
    c.n_vision_pre = take<std::int32_t>(f, "n_vision_pre");
    c.n_vision_post = take<std::int32_t>(f, "n_vision_post");
    c.ffn_mult = take<std::int32_t>(f, "ffn_mult");
    c.max_seq_len = take<std::int32_t>(f, "max_seq_len");
    c.predict_eom = take<std::uint8_t>(f, "predict_eom") != 0;
    c.seed = take<std::uint64_t>(f, "seed");
    c.rope_base = take<double>(f, "rope_base");
    c.norm_eps = take<double>(f, "norm_eps");
    const int n_text = take<std::int32_t>(f, "n_text");
    const int n_image = take<std::int32_t>(f, "n_image");
    const int max_grid = take<std::int32_t>(f, "max_grid");
    if (expect && !(c == *expect))
        throw ConfigError("load_checkpoint: checkpoint config does not match expectation");

    PolicyModel m = PolicyModel::zero_init(c, VocabLayout::make(n_text, n_image, max_grid));
    const std::uint32_t n_params = take<std::uint32_t>(f, "param count");
    if (n_params != m.params().entries.size())
        throw ConfigError("load_checkpoint: parameter count mismatch");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::uint32_t name_len = take<std::uint32_t>(f, "name length");
        if (name_len > 256) throw IoError("load_checkpoint: implausible name length");
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw IoError("load_checkpoint: truncated name");
        const std::uint32_t ndim = take<std::uint32_t>(f, "rank");
        if (ndim > 8) throw IoError("load_checkpoint: implausible rank");
        std::vector<int> shape(ndim);
        for (auto& dim : shape) dim = take<std::int32_t>(f, "dim");
        if (!m.params().has(name))
            throw ConfigError("load_checkpoint: unexpected parameter '" + name + "'");
        Tensor& dst = m.params().get(name);
        if (dst.shape != shape)
            throw ConfigError("load_checkpoint: shape mismatch for '" + name + "'");
        f.read(reinterpret_cast<char*>(dst.v.data()),
               static_cast<std::streamsize>(dst.v.size() * sizeof(double)));
        if (!f) throw IoError("load_checkpoint: truncated tensor '" + name + "'");
        check_finite(dst, "checkpoint tensor");
    }
    return m;
}

}  // namespace glyphrl
