#include "glyphrl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"

namespace glyphrl {

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("grpo: clip_eps must lie in (0,1)");
    if (!(kl_beta >= 0.0)) throw ConfigError("grpo: kl_beta must be >= 0");
    if (!(adv_std_floor > 0.0)) throw ConfigError("grpo: adv_std_floor must be > 0");
    if (!(lr >= 0.0)) throw ConfigError("grpo: lr must be >= 0");
    if (steps < 0) throw ConfigError("grpo: steps must be >= 0");
    if (prompts_per_step < 1) throw ConfigError("grpo: prompts_per_step must be >= 1");
}

std::vector<double> compute_advantages(const std::vector<double>& rewards, double std_floor) {
    const std::size_t g = rewards.size();
    if (g < 2) throw ConfigError("compute_advantages: need at least 2 rewards");
    if (!(std_floor > 0.0)) throw ConfigError("compute_advantages: std floor must be positive");
    double mean = 0.0;
    for (double r : rewards) {
        if (!std::isfinite(r)) throw NumericError("compute_advantages: non-finite reward");
        mean += r;
    }
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(g);  // population variance
    const double denom = std::max(std::sqrt(var), std_floor);
    std::vector<double> adv(g);
    for (std::size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / denom;
    return adv;
}

double kl_unbiased_term(double logp_theta, double logp_ref) {
    if (!std::isfinite(logp_theta) || !std::isfinite(logp_ref))
        throw NumericError("kl_unbiased_term: non-finite log-probability");
    const double d = logp_ref - logp_theta;
    return std::exp(d) - d - 1.0;
}

PolicyTriple make_triple(PolicyModel& theta, const PolicyModel& ref) {
    return PolicyTriple(theta, ref);
}

namespace {

// Positions in seq that were sampled actions (one per recorded logprob,
// contiguous after the generation prefix).
std::vector<int> action_positions(const Trajectory& traj, const RolloutPrompt& prompt,
                                  const VocabLayout& v) {
    const std::size_t prefix = span_prefix(prompt.prompt, prompt.h, prompt.w, v).size();
    std::vector<int> pos(traj.old_code_logprobs.size());
    for (std::size_t j = 0; j < pos.size(); ++j) pos[j] = static_cast<int>(prefix + j);
    return pos;
}

struct TrajTapeParts {
    Value obj;  // surrogate minus beta * KL, before group averaging
    double kl = 0.0;
    std::vector<double> ratios;
};

TrajTapeParts traj_objective(Tape& t, PolicyModel& theta, const Trajectory& traj,
                             const RolloutPrompt& prompt, const GrpoConfig& cfg) {
    const VocabLayout& v = theta.vocab();
    const std::vector<int> acts = action_positions(traj, prompt, v);
    if (acts.empty()) throw DimensionError("grpo: trajectory has no sampled actions");
    if (traj.ref_code_logprobs.size() != acts.size())
        throw DimensionError("grpo: reference logprob count mismatch");
    const int n = static_cast<int>(acts.size());
    if (acts.back() + 1 > static_cast<int>(traj.seq.size()))
        throw DimensionError("grpo: action position past sequence end");

    const TokenSeq input(traj.seq.begin(), traj.seq.end() - 1);
    std::vector<int> rows(acts.size()), cols(acts.size());
    for (int j = 0; j < n; ++j) {
        rows[j] = acts[j] - 1;
        cols[j] = theta.image_head_index(traj.seq[acts[j]]);
    }
    Value hidden = theta.forward_hidden(t, input);
    Value picked = gather_cols(theta.image_logprobs_at(t, hidden, rows), cols);  // {n}

    Tensor old_t = Tensor::zeros({n});
    Tensor ref_t = Tensor::zeros({n});
    for (int j = 0; j < n; ++j) {
        old_t.v[j] = traj.old_code_logprobs[j];
        ref_t.v[j] = traj.ref_code_logprobs[j];
    }
    const double a = traj.advantage;
    const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;

    TrajTapeParts parts;
    Value surr;
    if (cfg.per_token_ratio) {
        Value ratio = exp_(sub(picked, t.leaf(old_t)));
        surr = mean_all(min2(scale(ratio, a), scale(clamp(ratio, lo, hi), a)));
        parts.ratios = ratio.val().v;
    } else {
        double old_sum = 0.0;
        for (int j = 0; j < n; ++j) old_sum += old_t.v[j];
        Value ratio = exp_(addc(sum_all(picked), -old_sum));
        surr = min2(scale(ratio, a), scale(clamp(ratio, lo, hi), a));
        parts.ratios = {ratio.scalar()};
    }
    Value d = sub(t.leaf(ref_t), picked);
    Value k = addc(sub(exp_(d), d), -1.0);
    Value kl = cfg.kl_per_token_mean ? mean_all(k) : sum_all(k);
    parts.kl = kl.scalar();
    parts.obj = sub(surr, scale(kl, cfg.kl_beta));
    return parts;
}

}  // namespace

Trajectory rollout_one(const PolicyModel& policy, const PolicyModel* ref,
                       const RolloutPrompt& prompt, const RolloutEnv& env,
                       std::uint64_t sample_seed) {
    if (!env.atlas) throw ConfigError("rollout_one: no atlas");
    const VocabLayout& v = policy.vocab();
    SamplerConfig sc;
    sc.temperature = env.temperature;
    sc.top_k = env.top_k;
    sc.cfg_scale = env.cfg_scale;
    sc.seed = sample_seed;
    const SampleResult s = sample_grid(policy, prompt.prompt, prompt.h, prompt.w, sc);

    Trajectory traj;
    traj.seq = s.seq;
    traj.grid = s.grid;
    traj.completed = s.completed;
    traj.old_code_logprobs = s.code_logprobs;

    PixelGrid pixels;
    OcrResult ocr;
    RewardContext ctx;
    ctx.constraints = &prompt.constraints;
    ctx.atlas = env.atlas;
    if (s.completed) {
        pixels = render(s.grid, *env.atlas);
        ocr = toy_ocr(pixels, *env.atlas, v);
        ctx.grid = &traj.grid;
        ctx.pixels = &pixels;
        ctx.ocr = &ocr;
    }
    traj.report = aggregate(env.rewards, ctx, prompt.id, prompt.id + "#" +
                                                              std::to_string(sample_seed));
    traj.reward = traj.report.total;

    if (ref) {
        std::vector<bool> mask(traj.seq.size(), false);
        for (int p : action_positions(traj, prompt, v)) mask[static_cast<std::size_t>(p)] = true;
        const SeqLogprob rl = sequence_logprob(*ref, traj.seq, mask);
        traj.ref_code_logprobs = rl.per_pos;
    }
    return traj;
}

RolloutGroup sample_group(const PolicyModel& policy, const PolicyModel* ref,
                          const RolloutPrompt& prompt, const RolloutEnv& env,
                          const GrpoConfig& cfg, int step, int prompt_index) {
    cfg.validate();
    RolloutGroup g;
    g.prompt_index = prompt_index;
    g.prompt = prompt;
    g.trajs.resize(static_cast<std::size_t>(cfg.group_size));
    for (int j = 0; j < cfg.group_size; ++j) {
        const std::uint64_t seed =
            Rng::stream(cfg.seed, {0x726f6c6cULL, static_cast<std::uint64_t>(step),
                                   static_cast<std::uint64_t>(prompt_index),
                                   static_cast<std::uint64_t>(j)})
                .next_u64();
        g.trajs[j] = rollout_one(policy, ref, prompt, env, seed);
    }
    std::vector<double> rewards(g.trajs.size());
    for (std::size_t j = 0; j < g.trajs.size(); ++j) rewards[j] = g.trajs[j].reward;
    const std::vector<double> adv = compute_advantages(rewards, cfg.adv_std_floor);
    for (std::size_t j = 0; j < g.trajs.size(); ++j) g.trajs[j].advantage = adv[j];
    return g;
}

Value grpo_group_loss(Tape& t, PolicyModel& theta, const RolloutGroup& group,
                      const GrpoConfig& cfg) {
    cfg.validate();
    if (group.trajs.empty()) throw ConfigError("grpo_group_loss: empty group");
    Value total;
    bool have = false;
    for (const Trajectory& traj : group.trajs) {
        Value obj = traj_objective(t, theta, traj, group.prompt, cfg).obj;
        total = have ? add(total, obj) : obj;
        have = true;
    }
    return scale(total, -1.0 / static_cast<double>(group.trajs.size()));
}

StepReport train_step(PolicyTriple& triple, const std::vector<RolloutPrompt>& prompts,
                      const RolloutEnv& env, const GrpoConfig& cfg, int step_index) {
    cfg.validate();
    if (!triple.theta || !triple.ref) throw ConfigError("train_step: incomplete policy triple");
    if (prompts.empty()) throw ConfigError("train_step: empty prompt batch");
    if (!env.atlas) throw ConfigError("train_step: no atlas");
    if (env.rewards.empty()) throw ConfigError("train_step: no reward components");

    // On-policy snapshot: rollouts sample the pre-update parameters.
    triple.old_policy.params().copy_values_from(triple.theta->params());

    const int p = static_cast<int>(prompts.size());
    const int g = cfg.group_size;
    const int total = p * g;
    std::vector<Trajectory> trajs(static_cast<std::size_t>(total));
    std::vector<std::string> errors(static_cast<std::size_t>(total));

#pragma omp parallel for schedule(static)
    for (int f = 0; f < total; ++f) {
        const int i = f / g, j = f % g;
        try {
            const std::uint64_t seed =
                Rng::stream(cfg.seed, {0x726f6c6cULL, static_cast<std::uint64_t>(step_index),
                                       static_cast<std::uint64_t>(i),
                                       static_cast<std::uint64_t>(j)})
                    .next_u64();
            trajs[f] = rollout_one(triple.old_policy, triple.ref, prompts[i], env, seed);
        } catch (const std::exception& e) {
            errors[f] = e.what();
        }
    }
    for (int f = 0; f < total; ++f)
        if (!errors[f].empty())
            throw NumericError("train_step: rollout failed at step " + std::to_string(step_index) +
                               " prompt " + std::to_string(f / g) + " rollout " +
                               std::to_string(f % g) + ": " + errors[f]);

    for (int i = 0; i < p; ++i) {
        std::vector<double> rewards(static_cast<std::size_t>(g));
        for (int j = 0; j < g; ++j) rewards[j] = trajs[i * g + j].reward;
        const std::vector<double> adv = compute_advantages(rewards, cfg.adv_std_floor);
        for (int j = 0; j < g; ++j) trajs[i * g + j].advantage = adv[j];
    }

    std::vector<GradMap> grads(static_cast<std::size_t>(total));
    std::vector<double> objs(static_cast<std::size_t>(total), 0.0);
    std::vector<double> kls(static_cast<std::size_t>(total), 0.0);
    std::vector<std::vector<double>> ratios(static_cast<std::size_t>(total));

#pragma omp parallel for schedule(static)
    for (int f = 0; f < total; ++f) {
        try {
            Tape t;
            TrajTapeParts parts =
                traj_objective(t, *triple.theta, trajs[f], prompts[f / g], cfg);
            objs[f] = parts.obj.scalar();
            kls[f] = parts.kl;
            ratios[f] = std::move(parts.ratios);
            t.backward(scale(parts.obj, -1.0));
            grads[f] = t.param_grads(triple.theta->params());
        } catch (const std::exception& e) {
            errors[f] = e.what();
        }
    }
    for (int f = 0; f < total; ++f)
        if (!errors[f].empty())
            throw NumericError("train_step: gradient failed at step " + std::to_string(step_index) +
                               " prompt " + std::to_string(f / g) + " rollout " +
                               std::to_string(f % g) + ": " + errors[f]);

    GradMap reduced;
    for (int f = 0; f < total; ++f) grad_accumulate(reduced, grads[f], 1.0);
    const double inv = 1.0 / static_cast<double>(total);
    for (auto& [name, gt] : reduced)
        for (double& x : gt.v) x *= inv;

    StepReport rep;
    rep.step = step_index;
    rep.ratio_min = std::numeric_limits<double>::infinity();
    rep.ratio_max = -std::numeric_limits<double>::infinity();
    double obj_sum = 0.0, kl_sum = 0.0, reward_sum = 0.0;
    long clipped = 0, ratio_count = 0;
    std::map<std::string, double> comp_sums;
    for (int f = 0; f < total; ++f) {
        obj_sum += objs[f];
        kl_sum += kls[f];
        reward_sum += trajs[f].reward;
        rep.max_reward = std::max(rep.max_reward, trajs[f].reward);
        for (double r : ratios[f]) {
            rep.ratio_min = std::min(rep.ratio_min, r);
            rep.ratio_max = std::max(rep.ratio_max, r);
            if (std::abs(r - 1.0) > cfg.clip_eps) ++clipped;
            ++ratio_count;
        }
        for (const ComponentScore& cs : trajs[f].report.components)
            comp_sums[cs.name] += cs.score;
    }
    rep.mean_reward = reward_sum * inv;
    rep.kl = kl_sum * inv;
    rep.loss = -obj_sum * inv;
    rep.clip_fraction =
        ratio_count == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(ratio_count);
    for (const auto& [name, s] : comp_sums) rep.component_means[name] = s * inv;
    if (!std::isfinite(rep.loss))
        throw NumericError("train_step: non-finite loss at step " + std::to_string(step_index));

    adam_step(triple.theta->params(), reduced, cfg.lr);
    return rep;
}

BonResult best_of_n(const PolicyModel& policy, const RolloutPrompt& prompt, int n,
                    const RolloutEnv& env, std::uint64_t base_seed) {
    if (n < 1) throw ConfigError("best_of_n: need n >= 1");
    BonResult out;
    out.best_reward = -1.0;
    for (int k = 0; k < n; ++k) {
        const std::uint64_t seed =
            Rng::stream(base_seed, {0x626f6e00ULL, static_cast<std::uint64_t>(k)}).next_u64();
        const Trajectory traj = rollout_one(policy, nullptr, prompt, env, seed);
        out.rewards.push_back(traj.reward);
        if (traj.reward > out.best_reward) {
            out.best_reward = traj.reward;
            out.best_grid = traj.grid;
        }
    }
    return out;
}

}  // namespace glyphrl
