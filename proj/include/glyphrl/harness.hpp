#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "glyphrl/atlas.hpp"
#include "glyphrl/codec.hpp"
#include "glyphrl/grpo.hpp"
#include "glyphrl/policy.hpp"

namespace glyphrl {

// One synthetic text-rendering task: spell `target` into an h x w grid,
// remaining cells carrying the quiet fill code.
struct ToyTask {
    std::string target;
    int h = 0;
    int w = 0;
    int fill_code = -1;
    std::uint64_t seed = 0;  // per-example corruption stream

    bool operator==(const ToyTask& o) const = default;
};

struct SftExample {
    ToyTask task;
    CodeGrid grid;  // target grid, possibly corrupted

    bool operator==(const SftExample& o) const = default;
};

// Fixed-width prompt tokens: the target text padded with PAD to prompt_len.
TokenSeq task_prompt_tokens(const ToyTask& task, const VocabLayout& v, int prompt_len);

RolloutPrompt to_rollout_prompt(const ToyTask& task, const VocabLayout& v, int prompt_len);

// Uncorrupted target grid for a task.
CodeGrid clean_grid(const ToyTask& task);

// n tasks with length-bucketed targets (lengths 2..12, populations within 1),
// grids spelling the target, each cell independently replaced by a random
// noise code with probability noise_rate.
std::vector<SftExample> gen_dataset(int n, double noise_rate, std::uint64_t seed,
                                    const VocabLayout& v, const GlyphAtlas& atlas);

void save_dataset(const std::vector<SftExample>& ds, const std::string& path);
std::vector<SftExample> load_dataset(const std::string& path, const VocabLayout& v);

std::uint64_t fnv1a(const std::string& s);

// Deterministic hash split on the target string; eval ≈ 1/eval_mod of tasks.
struct DatasetSplit {
    std::vector<SftExample> train;
    std::vector<SftExample> eval;
};
DatasetSplit split_dataset(const std::vector<SftExample>& ds, int eval_mod = 5);

// Cosine decay from lr0 at t=0 to exactly 0 at t=total.
double cosine_lr(double lr0, int t, int total);

// Flat key=value configuration with typed access and a known-key whitelist.
struct Config {
    std::map<std::string, std::string> kv;

    static Config load(const std::string& path);   // '#' comments, blank lines ok
    static Config defaults();
    void apply_set(const std::string& assignment);  // "key=value"
    void validate_known() const;

    bool has(const std::string& key) const { return kv.count(key) != 0; }
    std::string get_str(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;

    PolicyConfig policy_config() const;
    GrpoConfig grpo_config() const;
    std::vector<RewardSpec> reward_specs() const;
};

// Exclusive ownership of an output directory for the lifetime of a run.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

// Every run directory gets exactly one manifest describing how to reproduce it.
void write_manifest(const std::string& dir, const Config& cfg,
                    const std::vector<std::string>& outputs);

struct SftRunReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int steps_run = 0;
    bool aborted = false;
    std::string checkpoint_path;
};

SftRunReport run_sft(const Config& cfg, const std::vector<SftExample>& dataset,
                     const GlyphAtlas& atlas, const std::string& out_dir);

struct RlRunReport {
    int steps_run = 0;
    double final_mean_reward = 0.0;
    std::string checkpoint_path;
    std::string metrics_path;
    std::string eval_path;
};

RlRunReport run_rl(const Config& cfg, const std::string& sft_checkpoint,
                   const std::vector<SftExample>& dataset, const GlyphAtlas& atlas,
                   const std::string& out_dir);

// Pluggable grid source for the text-accuracy protocol.
struct GridSampler {
    virtual ~GridSampler() = default;
    virtual CodeGrid sample(const ToyTask& task, std::uint64_t seed) const = 0;
};

struct PolicySampler : GridSampler {
    const PolicyModel* model = nullptr;
    int prompt_len = 12;
    double temperature = 1.0;
    int top_k = 0;
    double cfg_scale = 1.0;

    CodeGrid sample(const ToyTask& task, std::uint64_t seed) const override;
};

struct OracleSampler : GridSampler {  // copies the target exactly
    CodeGrid sample(const ToyTask& task, std::uint64_t seed) const override;
};

struct RandomSampler : GridSampler {  // uniform codes
    int n_codes = 0;
    CodeGrid sample(const ToyTask& task, std::uint64_t seed) const override;
};

constexpr int kLongTargetLen = 8;  // bucket boundary for short/long reporting

struct TextAccuracyReport {
    double overall = 0.0;
    double short_mean = 0.0;  // targets shorter than kLongTargetLen
    double long_mean = 0.0;
    std::vector<double> per_prompt;
};

TextAccuracyReport eval_text_accuracy(const GridSampler& sampler,
                                      const std::vector<ToyTask>& tasks,
                                      const GlyphAtlas& atlas, const VocabLayout& v,
                                      int samples_per_prompt = 4, std::uint64_t seed = 0);

struct CfgSweepRow {
    double scale = 0.0;
    double mean_reward = 0.0;
};

// Mean aggregate reward per guidance scale; per-prompt sampling seeds are
// shared across scales so rows differ only by the guidance arithmetic.
std::vector<CfgSweepRow> eval_cfg_sweep(const PolicyModel& model,
                                        const std::vector<ToyTask>& tasks,
                                        const std::vector<double>& scales,
                                        const RolloutEnv& env, int prompt_len,
                                        int samples_per_prompt, std::uint64_t seed);

// Mean single-sample reward of a policy over tasks (shared eval helper).
double eval_mean_reward(const PolicyModel& model, const std::vector<ToyTask>& tasks,
                        const RolloutEnv& env, int prompt_len, std::uint64_t seed);

std::vector<ToyTask> tasks_of(const std::vector<SftExample>& ds);

}  // namespace glyphrl
