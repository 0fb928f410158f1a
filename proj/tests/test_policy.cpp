#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "glyphrl/codec.hpp"
#include "glyphrl/errors.hpp"
#include "glyphrl/policy.hpp"
#include "glyphrl/rng.hpp"

using namespace glyphrl;

namespace {

PolicyConfig small_config() {
    PolicyConfig pc;
    pc.embed_dim = 16;
    pc.n_heads = 2;
    pc.n_core_blocks = 2;
    pc.n_vision_pre = 1;
    pc.n_vision_post = 1;
    pc.max_seq_len = 48;
    pc.seed = 5;
    return pc;
}

TokenSeq wire_seq(const VocabLayout& v, const std::string& text, const CodeGrid& g) {
    return embed_grid(encode_text(text, v), g, v);
}

CodeGrid grid_2x3(int base = 10) {
    CodeGrid g{2, 3, {}};
    for (int i = 0; i < 6; ++i) g.codes.push_back(base + i);
    return g;
}

double max_abs(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

}  // namespace

TEST_CASE("config validation") {
    PolicyConfig pc = small_config();
    CHECK_NOTHROW(pc.validate());
    pc.embed_dim = 15;  // not divisible by heads
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = small_config();
    pc.n_heads = 8;  // head_dim 2, odd pairs ok; head_dim must stay even
    pc.embed_dim = 8;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = small_config();
    pc.n_core_blocks = 0;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = small_config();
    pc.max_seq_len = 2;
    CHECK_THROWS_AS(pc.validate(), ConfigError);

    CHECK(small_config().n_blocks() == 4);
    CHECK(small_config().is_vision_block(0));
    CHECK_FALSE(small_config().is_vision_block(1));
    CHECK_FALSE(small_config().is_vision_block(2));
    CHECK(small_config().is_vision_block(3));
}

TEST_CASE("default-sized model has the expected parameter budget") {
    const VocabLayout v = VocabLayout::make();
    PolicyConfig pc;  // 32-dim, 6 blocks
    PolicyModel m(pc, v);
    CHECK(m.params().total_params() == 95008);
    CHECK(m.text_head_width() == 70);
    CHECK(m.image_head_width() == 256);

    // Deterministic init: same seed gives identical parameters.
    PolicyModel m2(pc, v);
    CHECK(m2.params().values_equal(m.params()));
    pc.seed = 2;
    PolicyModel m3(pc, v);
    CHECK_FALSE(m3.params().values_equal(m.params()));

    PolicyModel c = m.clone();
    CHECK(c.params().values_equal(m.params()));
    c.params().get("ln_f.g").v[0] += 1.0;
    CHECK_FALSE(c.params().values_equal(m.params()));
}

TEST_CASE("head index mapping covers text, specials and image codes") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    CHECK(m.text_head_index(0) == 0);
    CHECK(m.text_head_index(63) == 63);
    CHECK(m.text_head_index(v.som) == 64);
    CHECK(m.text_head_index(v.pad) == 69);
    CHECK_THROWS_AS((void)m.text_head_index(v.image_token(0)), RangeError);
    CHECK(m.image_head_index(v.image_token(0)) == 0);
    CHECK(m.image_head_index(v.image_token(255)) == 255);
    CHECK_THROWS_AS((void)m.image_head_index(3), RangeError);
    CHECK_THROWS_AS((void)m.image_head_index(v.eom), RangeError);  // predict_eom off
    CHECK_THROWS_AS((void)m.eom_image_slot(), ConfigError);

    PolicyConfig pe = small_config();
    pe.predict_eom = true;
    PolicyModel me(pe, v);
    CHECK(me.image_head_width() == 257);
    CHECK(me.eom_image_slot() == 256);
    CHECK(me.image_head_index(v.eom) == 256);
}

TEST_CASE("incremental runner reproduces the whole-sequence forward exactly") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq seq = wire_seq(v, "HI", grid_2x3(100));

    const std::vector<PositionLogits> all = forward_logits(m, seq);
    REQUIRE(all.size() == seq.size());

    PolicyRunner run(m);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        run.push(seq[i]);
        const Tensor got = all[i].image_head ? run.image_logits() : run.text_logits();
        CHECK(got.v == all[i].logits.v);  // same kernels, bit-identical paths
    }
}

TEST_CASE("causal masking: logits never depend on later tokens") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);

    // Pure text: mutate the tail, compare every earlier position.
    TokenSeq a = encode_text("HELLO WORLD", v);
    TokenSeq b = a;
    b.back() = v.char_token('!');
    const auto la = forward_logits(m, a);
    const auto lb = forward_logits(m, b);
    for (std::size_t i = 0; i + 1 < a.size(); ++i) CHECK(la[i].logits.v == lb[i].logits.v);
    CHECK(la.back().logits.v != lb.back().logits.v);

    // Image span: mutate the last code only.
    TokenSeq sa = wire_seq(v, "AB", grid_2x3(10));
    TokenSeq sb = sa;
    sb[sb.size() - 2] = v.image_token(200);
    const auto ia = forward_logits(m, sa);
    const auto ib = forward_logits(m, sb);
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) CHECK(ia[i].logits.v == ib[i].logits.v);
}

TEST_CASE("head schedule follows the wire structure") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq seq = wire_seq(v, "AB", grid_2x3());
    const auto lg = forward_logits(m, seq);
    // Positions predicting the six codes are exactly those before each code
    // token: indices 5..10 (prompt 2, SOM, two digits, IMG at index 5).
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const bool want = i >= 5 && i < 11;
        CHECK(lg[i].image_head == want);
        CHECK(lg[i].logits.cols() == (want ? 256 : 70));
    }
}

TEST_CASE("rotary positions give a relative-shift-invariant attention geometry") {
    Rng rng(9);
    const int d = 8, heads = 2;
    Tensor q = Tensor::zeros({1, d}), k = Tensor::zeros({1, d});
    for (double& x : q.v) x = rng.normal();
    for (double& x : k.v) x = rng.normal();

    auto rotate = [&](const Tensor& x, int pos) {
        Tape t;
        return rope_rows(t.leaf(x), {pos}, heads).val();
    };
    auto dot = [&](const Tensor& a, const Tensor& b) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += a.v[i] * b.v[i];
        return s;
    };

    // Isometry: rotation preserves norms.
    for (int pos : {0, 1, 5, 40}) {
        const Tensor r = rotate(q, pos);
        CHECK(dot(r, r) == doctest::Approx(dot(q, q)).epsilon(1e-12));
    }
    // Position 0 is the identity rotation.
    CHECK(max_abs(rotate(q, 0), q) == 0.0);

    // <R_i q, R_j k> depends only on i - j.
    const double base_ = dot(rotate(q, 7), rotate(k, 3));
    for (int shift : {1, 4, 11}) {
        const double shifted = dot(rotate(q, 7 + shift), rotate(k, 3 + shift));
        CHECK(shifted == doctest::Approx(base_).epsilon(1e-10));
    }
    const double other = dot(rotate(q, 8), rotate(k, 3));
    CHECK(std::abs(other - base_) > 1e-6);  // different offset, different geometry
}

TEST_CASE("vision blocks are inert on text positions") {
    const VocabLayout v = VocabLayout::make();
    PolicyConfig big_cfg = small_config();  // vision 1 + core 2 + vision 1
    PolicyModel big(big_cfg, v);

    PolicyConfig small_cfg = big_cfg;
    small_cfg.n_vision_pre = 0;
    small_cfg.n_vision_post = 0;
    PolicyModel small = PolicyModel::zero_init(small_cfg, v);

    // Core blocks sit at indices 1,2 in the big stack and 0,1 in the small one.
    auto copy_block = [&](int from, int to) {
        const std::string f = "blk" + std::to_string(from) + ".";
        const std::string t = "blk" + std::to_string(to) + ".";
        for (const char* part : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln1.g", "ffn.w1",
                                 "ffn.w2", "ln2.g"})
            small.params().get(t + part) = big.params().get(f + part);
    };
    copy_block(1, 0);
    copy_block(2, 1);
    for (const char* shared :
         {"tok_emb_text", "tok_emb_image", "ln_f.g", "head_text.w", "head_img.w"})
        small.params().get(shared) = big.params().get(shared);

    const TokenSeq text = encode_text("GATED BLOCKS", v);
    const auto lb = forward_logits(big, text);
    const auto ls = forward_logits(small, text);
    for (std::size_t i = 0; i < text.size(); ++i) CHECK(lb[i].logits.v == ls[i].logits.v);

    // With image rows present the extra blocks must matter.
    const TokenSeq mixed = wire_seq(v, "AB", grid_2x3());
    const auto mb = forward_logits(big, mixed);
    const auto ms = forward_logits(small, mixed);
    CHECK(mb[6].logits.v != ms[6].logits.v);  // a code-predicting position
}

TEST_CASE("sequence_logprob agrees with full-sequence softmax rows") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq seq = wire_seq(v, "OK", grid_2x3(40));
    const std::vector<bool> mask = modality_mask(seq, v, Supervise::Image);

    const SeqLogprob lp = sequence_logprob(m, seq, mask);
    REQUIRE(lp.per_pos.size() == 6);
    REQUIRE(lp.positions.size() == 6);

    const auto lg = forward_logits(m, seq);
    double want_sum = 0.0;
    for (std::size_t j = 0; j < lp.positions.size(); ++j) {
        const int pos = lp.positions[j];
        CHECK(mask[static_cast<std::size_t>(pos)]);
        const Tensor row = log_softmax_tensor(lg[static_cast<std::size_t>(pos) - 1].logits);
        const double want = row.v[static_cast<std::size_t>(m.image_head_index(seq[pos]))];
        CHECK(lp.per_pos[j] == doctest::Approx(want).epsilon(1e-12));
        want_sum += want;
    }
    CHECK(lp.sum == doctest::Approx(want_sum).epsilon(1e-12));

    CHECK_THROWS_AS((void)sequence_logprob(m, seq, std::vector<bool>(3, false)), DimensionError);
    std::vector<bool> bad0(seq.size(), false);
    bad0[0] = true;
    CHECK_THROWS_AS((void)sequence_logprob(m, seq, bad0), DimensionError);
}

TEST_CASE("sampling is seed-deterministic and structurally valid") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq prompt = encode_text("XY", v);

    SamplerConfig sc;
    sc.seed = 31;
    const SampleResult a = sample_grid(m, prompt, 3, 4, sc);
    const SampleResult b = sample_grid(m, prompt, 3, 4, sc);
    CHECK(a.seq == b.seq);
    CHECK(a.code_logprobs == b.code_logprobs);
    CHECK(a.completed);
    CHECK(a.grid.h == 3);
    CHECK(a.grid.w == 4);
    REQUIRE(a.grid.codes.size() == 12);
    const ExtractResult ex = extract_grid(a.seq, v);
    CHECK(ex.grid == a.grid);
    CHECK(ex.prompt == prompt);

    sc.seed = 32;
    CHECK(sample_grid(m, prompt, 3, 4, sc).seq != a.seq);

    // Reported log-probs are the conditional teacher-forced ones.
    const std::vector<bool> mask = modality_mask(a.seq, v, Supervise::Image);
    const SeqLogprob lp = sequence_logprob(m, a.seq, mask);
    REQUIRE(lp.per_pos.size() == a.code_logprobs.size());
    for (std::size_t i = 0; i < lp.per_pos.size(); ++i)
        CHECK(lp.per_pos[i] == a.code_logprobs[i]);
    CHECK(lp.sum == a.logprob_sum);
}

TEST_CASE("guidance arithmetic and its invariants") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq prompt = encode_text("QZ", v);
    SamplerConfig sc;
    sc.seed = 77;

    // Scale 1 is bit-identical to the guidance-free path.
    SamplerConfig s1 = sc;
    s1.cfg_scale = 1.0;
    const SampleResult plain = sample_grid(m, prompt, 2, 3, sc);
    const SampleResult unit = sample_grid(m, prompt, 2, 3, s1);
    CHECK(plain.seq == unit.seq);
    CHECK(plain.code_logprobs == unit.code_logprobs);

    // Scale 0 is the pure null-prompt distribution: the prompt cannot matter.
    SamplerConfig s0 = sc;
    s0.cfg_scale = 0.0;
    const SampleResult za = sample_grid(m, encode_text("AA", v), 2, 3, s0);
    const SampleResult zb = sample_grid(m, encode_text("ZZ", v), 2, 3, s0);
    CHECK(za.grid == zb.grid);

    // Guided sampling still reports conditional log-probs.
    SamplerConfig s3 = sc;
    s3.cfg_scale = 3.0;
    const SampleResult guided = sample_grid(m, prompt, 2, 3, s3);
    const SeqLogprob lp =
        sequence_logprob(m, guided.seq, modality_mask(guided.seq, v, Supervise::Image));
    REQUIRE(lp.per_pos.size() == guided.code_logprobs.size());
    for (std::size_t i = 0; i < lp.per_pos.size(); ++i)
        CHECK(lp.per_pos[i] == guided.code_logprobs[i]);
}

TEST_CASE("temperature and top-k controls") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq prompt = encode_text("AB", v);

    // top_k=1 is greedy decoding: seed cannot matter, and each code is the
    // stepwise conditional argmax.
    SamplerConfig g1;
    g1.top_k = 1;
    g1.seed = 1;
    SamplerConfig g2 = g1;
    g2.seed = 999;
    const SampleResult ga = sample_grid(m, prompt, 2, 2, g1);
    const SampleResult gb = sample_grid(m, prompt, 2, 2, g2);
    CHECK(ga.seq == gb.seq);

    PolicyRunner run(m);
    for (Token t : span_prefix(prompt, 2, 2, v)) run.push(t);
    for (int c : ga.grid.codes) {
        const Tensor z = run.image_logits();
        int arg = 0;
        for (int i = 1; i < z.cols(); ++i)
            if (z.v[i] > z.v[arg]) arg = i;
        CHECK(c == arg);
        run.push(v.image_token(c));
    }

    // Extreme cold temperature concentrates on the same argmax path.
    SamplerConfig cold;
    cold.temperature = 1e-6;
    cold.seed = 4;
    CHECK(sample_grid(m, prompt, 2, 2, cold).grid == ga.grid);

    // Valid grids at other settings.
    SamplerConfig mixed;
    mixed.temperature = 0.7;
    mixed.top_k = 13;
    mixed.seed = 5;
    CHECK(sample_grid(m, prompt, 2, 2, mixed).grid.codes.size() == 4);

    SamplerConfig bad;
    bad.temperature = 0.0;
    CHECK_THROWS_AS((void)sample_grid(m, prompt, 2, 2, bad), ConfigError);
    bad = SamplerConfig{};
    bad.top_k = -1;
    CHECK_THROWS_AS((void)sample_grid(m, prompt, 2, 2, bad), ConfigError);
    bad.top_k = m.image_head_width() + 1;
    CHECK_THROWS_AS((void)sample_grid(m, prompt, 2, 2, bad), ConfigError);
    bad = SamplerConfig{};
    bad.cfg_scale = -0.5;
    CHECK_THROWS_AS((void)sample_grid(m, prompt, 2, 2, bad), ConfigError);

    // Length budget: prefix + codes + marker must fit max_seq_len.
    CHECK_THROWS_AS((void)sample_grid(m, encode_text("TOOLONGPROMPT", v), 8, 8, SamplerConfig{}),
                    RangeError);
}

TEST_CASE("model-predicted termination keeps structural invariants") {
    const VocabLayout v = VocabLayout::make();
    PolicyConfig pc = small_config();
    pc.predict_eom = true;
    PolicyModel m(pc, v);
    const TokenSeq prompt = encode_text("AB", v);
    int early = 0, full = 0;
    for (std::uint64_t seed = 0; seed < 24; ++seed) {
        SamplerConfig sc;
        sc.seed = seed;
        const SampleResult r = sample_grid(m, prompt, 2, 3, sc);
        CHECK(r.seq.back() == v.eom);
        if (r.completed) {
            ++full;
            CHECK(r.grid.codes.size() == 6);
            CHECK(extract_grid(r.seq, v).grid == r.grid);
        } else {
            ++early;
            CHECK(r.grid.codes.empty());
            CHECK(r.code_logprobs.size() < 7);
        }
    }
    // Random init puts ~1/257 mass on the stop slot per step; over 24 seeds
    // of up to 6 steps both outcomes are overwhelmingly likely to appear.
    CHECK(full > 0);
    CHECK(early + full == 24);
}

TEST_CASE("supervised step learns a single example") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    const TokenSeq seq = wire_seq(v, "AB", grid_2x3(50));
    SftItem item{seq, modality_mask(seq, v, Supervise::Image), "probe"};

    const double first = sft_step(m, {item}, 0.05).loss;
    CHECK(first == doctest::Approx(std::log(256.0)).epsilon(0.08));
    double last = first;
    for (int i = 0; i < 60; ++i) last = sft_step(m, {item}, 0.05).loss;
    CHECK(last < 0.05);  // memorized

    // Loss is the pre-step mean over supervised tokens only.
    SftReport rep = sft_step(m, {item, item}, 0.0);
    CHECK(rep.token_count == 12);

    CHECK_THROWS_AS((void)sft_step(m, {}, 0.1), ConfigError);
    SftItem bad = item;
    bad.mask.pop_back();
    CHECK_THROWS_AS((void)sft_step(m, {bad}, 0.1), DimensionError);
    SftItem tiny{{v.pad}, {false}, "tiny"};
    CHECK_THROWS_AS((void)sft_step(m, {tiny}, 0.1), DimensionError);
    SftItem unmasked{seq, std::vector<bool>(seq.size(), false), "none"};
    CHECK_THROWS_AS((void)sft_step(m, {unmasked}, 0.1), ConfigError);
}

TEST_CASE("text supervision trains through the text head") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    TokenSeq seq = encode_text("CAT", v);
    seq.push_back(v.eos);
    std::vector<bool> mask(seq.size(), true);
    mask[0] = false;
    SftItem item{seq, mask, "text"};
    const double first = sft_step(m, {item}, 0.05).loss;
    CHECK(first == doctest::Approx(std::log(70.0)).epsilon(0.15));
    double last = first;
    for (int i = 0; i < 60; ++i) last = sft_step(m, {item}, 0.05).loss;
    CHECK(last < 0.05);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const VocabLayout v = VocabLayout::make();
    PolicyConfig pc = small_config();
    PolicyModel m(pc, v);
    // Perturb away from init so the file is not trivially reproducible.
    SftItem item{wire_seq(v, "AB", grid_2x3()), {}, "x"};
    item.mask = modality_mask(item.seq, v, Supervise::Image);
    (void)sft_step(m, {item}, 0.01);

    const std::string path = "policy_test_ckpt.bin";
    save_checkpoint(m, path);
    const PolicyModel back = load_checkpoint(path);
    CHECK(back.config() == pc);
    CHECK(back.vocab().vocab_size() == v.vocab_size());
    CHECK(back.params().values_equal(m.params()));

    // Loading with a config expectation enforces an exact match.
    CHECK_NOTHROW((void)load_checkpoint(path, &pc));
    PolicyConfig other = pc;
    other.n_core_blocks = 3;
    CHECK_THROWS_AS((void)load_checkpoint(path, &other), ConfigError);

    CHECK_THROWS_AS((void)load_checkpoint("missing_ckpt.bin"), IoError);
    const std::string junk = "policy_test_junk.bin";
    {
        std::ofstream f(junk, std::ios::binary);
        f << "definitely not a checkpoint";
    }
    CHECK_THROWS_AS((void)load_checkpoint(junk), IoError);
    std::remove(path.c_str());
    std::remove(junk.c_str());
}

TEST_CASE("forward rejects malformed inputs") {
    const VocabLayout v = VocabLayout::make();
    PolicyModel m(small_config(), v);
    Tape t;
    CHECK_THROWS_AS((void)m.forward_hidden(t, {}), DimensionError);
    TokenSeq long_seq(static_cast<std::size_t>(m.config().max_seq_len) + 1, v.pad);
    Tape t2;
    CHECK_THROWS_AS((void)m.forward_hidden(t2, long_seq), RangeError);
    Tape t3;
    CHECK_THROWS_AS((void)m.forward_hidden(t3, {9999}), RangeError);
    PolicyRunner run(m);
    CHECK_THROWS_AS((void)run.text_logits(), IndexError);
}
