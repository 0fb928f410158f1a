#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "glyphrl/atlas.hpp"
#include "glyphrl/codec.hpp"
#include "glyphrl/errors.hpp"
#include "glyphrl/grpo.hpp"
#include "glyphrl/policy.hpp"
#include "glyphrl/rng.hpp"

using namespace glyphrl;

namespace {

struct Env {
    VocabLayout v = VocabLayout::make();
    GlyphAtlas atlas = default_atlas(v);
    PolicyConfig pc;
    PolicyModel model;

    Env() : pc(make_config()), model(pc, v) {}

    static PolicyConfig make_config() {
        PolicyConfig pc;
        pc.embed_dim = 16;
        pc.n_heads = 2;
        pc.n_core_blocks = 1;
        pc.n_vision_pre = 1;
        pc.n_vision_post = 1;
        pc.max_seq_len = 48;
        pc.seed = 21;
        return pc;
    }

    RolloutPrompt prompt(const std::string& text, int h, int w) const {
        RolloutPrompt rp;
        rp.prompt = encode_text(text, v);
        rp.h = h;
        rp.w = w;
        rp.constraints.target = text;
        rp.constraints.h = h;
        rp.constraints.w = w;
        rp.constraints.fill_code = atlas.codes_of_class(GlyphAtlas::kPlain).front();
        rp.id = text;
        return rp;
    }

    RolloutEnv rollout_env() const {
        RolloutEnv re;
        re.atlas = &atlas;
        re.rewards = default_rewards();
        return re;
    }

    RolloutEnv const_reward_env(double value) const {
        RolloutEnv re;
        re.atlas = &atlas;
        re.rewards = {{"const", 1.0, [value](const RewardContext&) { return value; }}};
        return re;
    }
};

GrpoConfig small_grpo(int group) {
    GrpoConfig g;
    g.group_size = group;
    g.prompts_per_step = 1;
    g.steps = 1;
    return g;
}

}  // namespace

TEST_CASE("group advantages are standardized with a population std") {
    const std::vector<double> a = compute_advantages({1.0, 2.0, 3.0}, 1e-6);
    REQUIRE(a.size() == 3);
    // std = sqrt(2/3), so the endpoints sit at +-sqrt(3/2).
    CHECK(a[0] == doctest::Approx(-1.224744871391589).epsilon(1e-12));
    CHECK(a[1] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(a[2] == doctest::Approx(1.224744871391589).epsilon(1e-12));

    // Identical rewards hit the floor and give exact zeros.
    const std::vector<double> z = compute_advantages({0.7, 0.7, 0.7, 0.7}, 1e-6);
    for (double x : z) CHECK(x == 0.0);

    // Near-identical rewards stay bounded by the floor.
    const std::vector<double> tiny = compute_advantages({0.5, 0.5 + 1e-12}, 1e-6);
    for (double x : tiny) CHECK(std::abs(x) < 1e-5);

    Rng rng(31);
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> r(static_cast<std::size_t>(2 + rng.uniform_int(15)));
        for (double& x : r) x = rng.uniform01();
        const std::vector<double> adv = compute_advantages(r, 1e-6);
        double mean = 0.0, sq = 0.0;
        for (double x : adv) mean += x;
        mean /= static_cast<double>(adv.size());
        CHECK(std::abs(mean) < 1e-9);
        for (double x : adv) sq += x * x;
        // Population standardization puts the second moment at n (unless floored).
        CHECK(sq / static_cast<double>(adv.size()) == doctest::Approx(1.0).epsilon(1e-6));
    }

    CHECK_THROWS_AS((void)compute_advantages({}, 1e-6), ConfigError);
    CHECK_THROWS_AS((void)compute_advantages({1.0}, 0.0), ConfigError);
}

TEST_CASE("divergence estimator: closed-form value, positivity, unbiasedness") {
    // r = 2 case: k = 2 - 1 - ln 2.
    CHECK(kl_unbiased_term(0.0, std::log(2.0)) ==
          doctest::Approx(0.3068528194400547).epsilon(1e-15));
    CHECK(kl_unbiased_term(0.0, 0.0) == 0.0);

    Rng rng(32);
    for (int t = 0; t < 2000; ++t) {
        const double lp = -3.0 * rng.uniform01();
        const double lr = -3.0 * rng.uniform01();
        CHECK(kl_unbiased_term(lp, lr) >= 0.0);
    }

    // Five-symbol enumeration vs Monte Carlo mean of the estimator.
    const std::vector<double> p{0.35, 0.25, 0.2, 0.15, 0.05};
    const std::vector<double> q{0.2, 0.2, 0.2, 0.2, 0.2};
    double exact = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) exact += p[i] * std::log(p[i] / q[i]);

    Rng mc(33);
    double acc = 0.0;
    const int n = 100000;
    for (int t = 0; t < n; ++t) {
        const double u = mc.uniform01();
        double c = 0.0;
        std::size_t x = p.size() - 1;
        for (std::size_t i = 0; i < p.size(); ++i) {
            c += p[i];
            if (u < c) {
                x = i;
                break;
            }
        }
        acc += kl_unbiased_term(std::log(p[x]), std::log(q[x]));
    }
    const double estimate = acc / n;
    CHECK(std::abs(estimate - exact) / exact < 0.05);
}

TEST_CASE("rollouts carry scores, conditional log-probs and reference log-probs") {
    Env e;
    const RolloutPrompt rp = e.prompt("AB", 2, 3);
    const RolloutEnv re = e.rollout_env();
    const PolicyModel ref = e.model.clone();

    const Trajectory t = rollout_one(e.model, &ref, rp, re, 99);
    CHECK(t.completed);
    CHECK(t.grid.h == 2);
    CHECK(t.grid.w == 3);
    REQUIRE(t.old_code_logprobs.size() == 6);
    REQUIRE(t.ref_code_logprobs.size() == 6);
    // Reference equals the actor here, so the log-probs must coincide exactly.
    for (std::size_t i = 0; i < 6; ++i) CHECK(t.old_code_logprobs[i] == t.ref_code_logprobs[i]);
    CHECK(t.reward == t.report.total);
    CHECK(t.report.trajectory_id == "AB#99");
    CHECK(extract_grid(t.seq, e.v).grid == t.grid);

    // Same seed, same trajectory; different seed, different trajectory.
    const Trajectory t2 = rollout_one(e.model, &ref, rp, re, 99);
    CHECK(t2.seq == t.seq);
    CHECK(t2.reward == t.reward);
    const Trajectory t3 = rollout_one(e.model, &ref, rp, re, 100);
    CHECK(t3.seq != t.seq);

    RolloutEnv no_atlas;
    no_atlas.rewards = default_rewards();
    CHECK_THROWS_AS((void)rollout_one(e.model, &ref, rp, no_atlas, 1), ConfigError);
}

TEST_CASE("groups standardize rewards into advantages") {
    Env e;
    const RolloutPrompt rp = e.prompt("CAT", 2, 3);
    const RolloutEnv re = e.rollout_env();
    const PolicyModel ref = e.model.clone();
    const GrpoConfig cfg = small_grpo(8);

    const RolloutGroup g = sample_group(e.model, &ref, rp, re, cfg, 0, 0);
    REQUIRE(g.trajs.size() == 8);
    CHECK(g.prompt_index == 0);
    double mean_adv = 0.0;
    std::vector<double> rewards;
    for (const Trajectory& t : g.trajs) {
        mean_adv += t.advantage;
        rewards.push_back(t.reward);
    }
    CHECK(std::abs(mean_adv / 8.0) < 1e-9);
    const std::vector<double> want = compute_advantages(rewards, cfg.adv_std_floor);
    for (std::size_t i = 0; i < 8; ++i) CHECK(g.trajs[i].advantage == want[i]);

    // Group sampling is reproducible and step-dependent.
    const RolloutGroup g2 = sample_group(e.model, &ref, rp, re, cfg, 0, 0);
    CHECK(g2.trajs[0].seq == g.trajs[0].seq);
    const RolloutGroup g3 = sample_group(e.model, &ref, rp, re, cfg, 1, 0);
    CHECK(g3.trajs[0].seq != g.trajs[0].seq);
}

TEST_CASE("loss gradient at the on-policy point matches the analytic policy gradient") {
    Env e;
    const RolloutPrompt rp = e.prompt("OK", 2, 3);
    const RolloutEnv re = e.rollout_env();
    const PolicyModel ref = e.model.clone();
    GrpoConfig cfg = small_grpo(6);

    const RolloutGroup group = sample_group(e.model, &ref, rp, re, cfg, 0, 0);

    Tape t;
    const Value loss = grpo_group_loss(t, e.model, group, cfg);
    t.backward(loss);
    const GradMap got = t.param_grads(e.model.params());

    // Oracle: at theta == theta_old the clipped surrogate reduces to the
    // plain policy gradient -1/G sum_i A_i grad logpi(traj_i); the divergence
    // term contributes nothing because ref == theta makes d == 0.
    GradMap want;
    for (const auto& entry : e.model.params().entries)
        want[entry.name] = Tensor::zeros(entry.value.shape);
    const TokenSeq prefix = span_prefix(rp.prompt, rp.h, rp.w, e.v);
    const int n_codes = rp.h * rp.w;
    for (const Trajectory& traj : group.trajs) {
        Tape ti;
        const TokenSeq input(traj.seq.begin(), traj.seq.end() - 1);
        const Value hidden = e.model.forward_hidden(ti, input);
        std::vector<int> rows;
        std::vector<int> cols;
        for (int j = 0; j < n_codes; ++j) {
            rows.push_back(static_cast<int>(prefix.size()) + j - 1);
            cols.push_back(e.model.image_head_index(traj.seq[prefix.size() + j]));
        }
        const Value picked = gather_cols(e.model.image_logprobs_at(ti, hidden, rows), cols);
        ti.backward(sum_all(picked));
        grad_accumulate(want, ti.param_grads(e.model.params()),
                        -traj.advantage / static_cast<double>(group.trajs.size()));
    }

    double worst = 0.0;
    for (const auto& [name, g] : want) {
        const Tensor& a = got.at(name);
        for (std::size_t i = 0; i < g.v.size(); ++i) {
            const double scale_ = std::max({std::abs(g.v[i]), std::abs(a.v[i]), 1e-4});
            worst = std::max(worst, std::abs(g.v[i] - a.v[i]) / scale_);
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("clip boundary arithmetic on a synthetic off-policy group") {
    Env e;
    const RolloutPrompt rp = e.prompt("HI", 2, 2);
    const RolloutEnv re = e.rollout_env();
    const PolicyModel ref = e.model.clone();
    GrpoConfig cfg = small_grpo(2);
    cfg.kl_beta = 0.0;
    const double eps = cfg.clip_eps;  // 0.2

    RolloutGroup group = sample_group(e.model, &ref, rp, re, cfg, 0, 0);
    REQUIRE(group.trajs.size() == 2);
    // Shift the stored behavior log-probs so the sequence ratio is exactly
    // 1 + 2*eps, beyond the clip boundary.
    const double shift = std::log(1.0 + 2.0 * eps) / 4.0;
    for (Trajectory& t : group.trajs)
        for (double& lp : t.old_code_logprobs) lp -= shift;
    group.trajs[0].advantage = 1.0;   // clipped: (1+eps)*A
    group.trajs[1].advantage = -1.0;  // unclipped: (1+2eps)*A is the smaller

    Tape t;
    const double loss = grpo_group_loss(t, e.model, group, cfg).scalar();
    const double want = -0.5 * ((1.0 + eps) * 1.0 + (1.0 + 2.0 * eps) * -1.0);
    CHECK(loss == doctest::Approx(want).epsilon(1e-9));
    CHECK(want == doctest::Approx(eps / 2.0).epsilon(1e-12));

    // Per-token ratios spread the same shift across tokens; each stays inside
    // the clip band, so the zero-advantage trajectory drops out and the other
    // contributes its mean unclipped per-token ratio.
    GrpoConfig per = cfg;
    per.per_token_ratio = true;
    group.trajs[0].advantage = 1.0;
    group.trajs[1].advantage = 0.0;
    Tape t2;
    const double loss2 = grpo_group_loss(t2, e.model, group, per).scalar();
    const double per_tok = std::exp(shift);  // (1+2eps)^(1/4) ~ 1.048 < 1+eps
    CHECK(loss2 == doctest::Approx(-0.5 * per_tok).epsilon(1e-9));
}

TEST_CASE("divergence penalty enters the loss with the configured weight") {
    Env e;
    const RolloutPrompt rp = e.prompt("GO", 2, 2);
    const RolloutEnv re = e.rollout_env();
    const PolicyModel ref = e.model.clone();
    GrpoConfig cfg = small_grpo(2);
    cfg.kl_beta = 0.05;

    RolloutGroup group = sample_group(e.model, &ref, rp, re, cfg, 0, 0);
    const double c = 0.3;  // pretend the reference is off by exp(0.3) per token
    for (Trajectory& t : group.trajs) {
        for (double& lp : t.ref_code_logprobs) lp += c;
        t.advantage = 0.0;
    }
    const double k = std::exp(c) - c - 1.0;

    Tape t;
    CHECK(grpo_group_loss(t, e.model, group, cfg).scalar() ==
          doctest::Approx(cfg.kl_beta * k).epsilon(1e-9));

    GrpoConfig sum_cfg = cfg;
    sum_cfg.kl_per_token_mean = false;
    Tape t2;
    CHECK(grpo_group_loss(t2, e.model, group, sum_cfg).scalar() ==
          doctest::Approx(cfg.kl_beta * k * 4.0).epsilon(1e-9));
}

TEST_CASE("a zero learning-rate step reports exact on-policy diagnostics") {
    Env e;
    PolicyModel theta = e.model.clone();
    const PolicyModel ref = e.model.clone();
    PolicyTriple triple = make_triple(theta, ref);
    GrpoConfig cfg = small_grpo(4);
    cfg.prompts_per_step = 2;
    cfg.lr = 0.0;
    const std::vector<RolloutPrompt> prompts{e.prompt("AB", 2, 3), e.prompt("XYZ", 2, 3)};
    const RolloutEnv re = e.rollout_env();

    const StepReport rep = train_step(triple, prompts, re, cfg, 0);
    CHECK(theta.params().values_equal(e.model.params()));
    CHECK(rep.ratio_min == 1.0);  // rollout and update policies coincide
    CHECK(rep.ratio_max == 1.0);
    CHECK(rep.clip_fraction == 0.0);
    CHECK(rep.kl == 0.0);  // reference equals the actor on step one
    CHECK(std::abs(rep.loss) < 1e-12);
    CHECK(rep.max_reward >= rep.mean_reward);
    REQUIRE(rep.component_means.count("ocr") == 1);
    REQUIRE(rep.component_means.count("alignment") == 1);
    REQUIRE(rep.component_means.count("aesthetic") == 1);
    const double recombined = 0.4 * rep.component_means.at("ocr") +
                              0.3 * rep.component_means.at("alignment") +
                              0.3 * rep.component_means.at("aesthetic");
    CHECK(rep.mean_reward == doctest::Approx(recombined).epsilon(1e-12));
}

TEST_CASE("constant rewards produce a null update even with a live optimizer") {
    Env e;
    PolicyModel theta = e.model.clone();
    const PolicyModel ref = e.model.clone();
    PolicyTriple triple = make_triple(theta, ref);
    GrpoConfig cfg = small_grpo(4);
    cfg.kl_beta = 0.0;
    cfg.lr = 3e-4;
    const std::vector<RolloutPrompt> prompts{e.prompt("AB", 2, 3)};

    const StepReport rep = train_step(triple, prompts, e.const_reward_env(0.7), cfg, 0);
    CHECK(rep.mean_reward == 0.7);
    CHECK(rep.max_reward == 0.7);
    CHECK(rep.loss == 0.0);  // every advantage is exactly zero
    CHECK(theta.params().values_equal(e.model.params()));
}

TEST_CASE("training steps are reproducible and sensitive to the step index") {
    Env e;
    const RolloutEnv re = e.rollout_env();
    GrpoConfig cfg = small_grpo(4);
    cfg.prompts_per_step = 1;
    const std::vector<RolloutPrompt> prompts{e.prompt("HI", 2, 3)};

    PolicyModel a = e.model.clone();
    PolicyModel b = e.model.clone();
    const PolicyModel ref = e.model.clone();
    PolicyTriple ta = make_triple(a, ref);
    PolicyTriple tb = make_triple(b, ref);
    const StepReport ra = train_step(ta, prompts, re, cfg, 0);
    const StepReport rb = train_step(tb, prompts, re, cfg, 0);
    CHECK(ra.mean_reward == rb.mean_reward);
    CHECK(ra.loss == rb.loss);
    CHECK(ra.kl == rb.kl);
    CHECK(a.params().values_equal(b.params()));
    CHECK_FALSE(a.params().values_equal(e.model.params()));  // lr > 0 moved theta

    PolicyModel c = e.model.clone();
    PolicyTriple tc = make_triple(c, ref);
    const StepReport rc = train_step(tc, prompts, re, cfg, 1);
    CHECK(rc.mean_reward != ra.mean_reward);
}

TEST_CASE("best-of-n shares sample prefixes and picks the maximum") {
    Env e;
    const RolloutPrompt rp = e.prompt("DOG", 2, 3);
    const RolloutEnv re = e.rollout_env();

    const BonResult one = best_of_n(e.model, rp, 1, re, 17);
    REQUIRE(one.rewards.size() == 1);
    CHECK(one.best_reward == one.rewards[0]);

    const BonResult four = best_of_n(e.model, rp, 4, re, 17);
    const BonResult sixteen = best_of_n(e.model, rp, 16, re, 17);
    REQUIRE(four.rewards.size() == 4);
    REQUIRE(sixteen.rewards.size() == 16);

    // Draw k depends only on (base_seed, k): prefixes agree across N.
    CHECK(four.rewards[0] == one.rewards[0]);
    for (int i = 0; i < 4; ++i) CHECK(sixteen.rewards[i] == four.rewards[i]);

    auto prefix_max = [](const std::vector<double>& r, int n) {
        return *std::max_element(r.begin(), r.begin() + n);
    };
    CHECK(four.best_reward == prefix_max(sixteen.rewards, 4));
    CHECK(one.best_reward <= four.best_reward);
    CHECK(four.best_reward <= sixteen.best_reward);
    CHECK(sixteen.best_reward == prefix_max(sixteen.rewards, 16));

    const BonResult again = best_of_n(e.model, rp, 16, re, 17);
    CHECK(again.rewards == sixteen.rewards);
    CHECK(again.best_grid == sixteen.best_grid);

    CHECK_THROWS_AS((void)best_of_n(e.model, rp, 0, re, 17), ConfigError);
}

TEST_CASE("grpo configuration is validated") {
    GrpoConfig g;
    CHECK_NOTHROW(g.validate());
    g.group_size = 1;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GrpoConfig{};
    g.clip_eps = 0.0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GrpoConfig{};
    g.kl_beta = -0.1;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GrpoConfig{};
    g.lr = -1.0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GrpoConfig{};
    g.adv_std_floor = 0.0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GrpoConfig{};
    g.prompts_per_step = 0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
}
