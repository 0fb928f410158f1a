#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glyphrl/atlas.hpp"
#include "glyphrl/policy.hpp"
#include "glyphrl/rewards.hpp"
#include "glyphrl/tape.hpp"

namespace glyphrl {

struct GrpoConfig {
    int group_size = 16;       // rollouts per prompt
    double clip_eps = 0.2;     // ratio clip half-width
    double kl_beta = 0.01;     // reference-divergence weight
    double lr = 3e-4;
    int steps = 100;
    int prompts_per_step = 16;
    double adv_std_floor = 1e-6;
    std::uint64_t seed = 0;
    bool per_token_ratio = false;    // default: one sequence-level ratio
    bool kl_per_token_mean = true;   // default: mean over tokens, not sum

    void validate() const;
};

// A_i = (r_i - mean) / max(population_std, floor).
std::vector<double> compute_advantages(const std::vector<double>& rewards, double std_floor);

// k = r - 1 - log r with r = exp(logp_ref - logp_theta); always >= 0.
double kl_unbiased_term(double logp_theta, double logp_ref);

// One prompt as the rollout loop sees it: tokens plus the structural
// expectations used for scoring.
struct RolloutPrompt {
    TokenSeq prompt;
    int h = 0;
    int w = 0;
    PromptConstraints constraints;
    std::string id;
};

struct Trajectory {
    TokenSeq seq;
    CodeGrid grid;
    bool completed = false;
    std::vector<double> old_code_logprobs;  // sampling-time, conditional T=1
    std::vector<double> ref_code_logprobs;
    double reward = 0.0;
    RewardReport report;
    double advantage = 0.0;
};

struct RolloutGroup {
    int prompt_index = 0;
    RolloutPrompt prompt;
    std::vector<Trajectory> trajs;
};

// Trainable policy, its rollout-time snapshot, and the frozen reference.
struct PolicyTriple {
    PolicyModel* theta = nullptr;
    const PolicyModel* ref = nullptr;
    PolicyModel old_policy;

    PolicyTriple(PolicyModel& th, const PolicyModel& rf)
        : theta(&th), ref(&rf), old_policy(th.clone()) {}
};

PolicyTriple make_triple(PolicyModel& theta, const PolicyModel& ref);

struct RolloutEnv {
    const GlyphAtlas* atlas = nullptr;
    std::vector<RewardSpec> rewards;
    double temperature = 1.0;
    int top_k = 0;
    double cfg_scale = 1.0;  // evaluation sweeps override this; RL keeps 1
};

// Sample one trajectory and score it; ref == nullptr skips reference
// logprobs (used by best-of-N).
Trajectory rollout_one(const PolicyModel& policy, const PolicyModel* ref,
                       const RolloutPrompt& prompt, const RolloutEnv& env,
                       std::uint64_t sample_seed);

// Full group for one prompt: G rollouts, rewards, advantages.
RolloutGroup sample_group(const PolicyModel& policy, const PolicyModel* ref,
                          const RolloutPrompt& prompt, const RolloutEnv& env,
                          const GrpoConfig& cfg, int step, int prompt_index);

// Clipped-surrogate loss (negated objective) for a whole group on one tape.
Value grpo_group_loss(Tape& t, PolicyModel& theta, const RolloutGroup& group,
                      const GrpoConfig& cfg);

struct StepReport {
    int step = 0;
    double mean_reward = 0.0;
    double max_reward = 0.0;
    std::map<std::string, double> component_means;
    double kl = 0.0;
    double clip_fraction = 0.0;
    double ratio_min = 0.0;
    double ratio_max = 0.0;
    double loss = 0.0;
};

// Snapshot -> rollouts -> rewards -> advantages -> one optimizer update.
StepReport train_step(PolicyTriple& triple, const std::vector<RolloutPrompt>& prompts,
                      const RolloutEnv& env, const GrpoConfig& cfg, int step_index);

struct BonResult {
    double best_reward = 0.0;
    CodeGrid best_grid;
    std::vector<double> rewards;  // per sample, in draw order
};

// N independent samples; sample k's seed depends only on (base_seed, k), so
// prefixes are shared across different N.
BonResult best_of_n(const PolicyModel& policy, const RolloutPrompt& prompt, int n,
                    const RolloutEnv& env, std::uint64_t base_seed);

}  // namespace glyphrl
