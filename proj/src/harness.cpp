#include "glyphrl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"
#include "json.hpp"

#ifndef GLYPHRL_GIT_REV
#define GLYPHRL_GIT_REV "unknown"
#endif

namespace glyphrl {

using nlohmann::json;

// ---- tasks and dataset ----

TokenSeq task_prompt_tokens(const ToyTask& task, const VocabLayout& v, int prompt_len) {
    TokenSeq p = encode_text(task.target, v);
    if (static_cast<int>(p.size()) > prompt_len)
        throw ConfigError("task target '" + task.target + "' exceeds prompt length " +
                          std::to_string(prompt_len));
    p.resize(static_cast<std::size_t>(prompt_len), v.pad);
    return p;
}

RolloutPrompt to_rollout_prompt(const ToyTask& task, const VocabLayout& v, int prompt_len) {
    RolloutPrompt rp;
    rp.prompt = task_prompt_tokens(task, v, prompt_len);
    rp.h = task.h;
    rp.w = task.w;
    rp.constraints.target = task.target;
    rp.constraints.h = task.h;
    rp.constraints.w = task.w;
    rp.constraints.fill_code = task.fill_code;
    rp.id = task.target;
    return rp;
}

CodeGrid clean_grid(const ToyTask& task) {
    if (task.h < 1 || task.w < 1) throw RangeError("clean_grid: nonpositive dims");
    if (static_cast<int>(task.target.size()) > task.h * task.w)
        throw RangeError("clean_grid: target does not fit grid");
    CodeGrid g;
    g.h = task.h;
    g.w = task.w;
    g.codes.assign(static_cast<std::size_t>(task.h) * task.w, task.fill_code);
    const VocabLayout v = VocabLayout::make();
    for (std::size_t i = 0; i < task.target.size(); ++i)
        g.codes[i] = v.char_token(task.target[i]);  // glyph code == charset index
    return g;
}

std::vector<SftExample> gen_dataset(int n, double noise_rate, std::uint64_t seed,
                                    const VocabLayout& v, const GlyphAtlas& atlas) {
    if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0))
        throw ConfigError("gen_dataset: noise_rate must lie in [0,1)");
    const std::vector<int> plain = atlas.codes_of_class(GlyphAtlas::kPlain);
    if (plain.empty()) throw ConfigError("gen_dataset: atlas has no quiet code");
    const int fill = plain.front();
    std::vector<int> smudges = atlas.codes_of_class(GlyphAtlas::kSmudge);
    if (smudges.size() < 2) throw ConfigError("gen_dataset: atlas has too few noise codes");
    // Two noise codes keep the per-cell corruption entropy low enough that a
    // well-fit model's loss floor stays under one nat per token.
    const std::vector<int> noise(smudges.end() - 2, smudges.end());

    constexpr int kMinLen = 2, kMaxLen = 12;
    constexpr int kMaxCells = 35;  // keeps every sequence inside max_seq_len
    Rng master = Rng::stream(seed, {0x64617461ULL});
    std::vector<SftExample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ToyTask task;
        const int len = kMinLen + i % (kMaxLen - kMinLen + 1);
        task.target.resize(static_cast<std::size_t>(len));
        for (char& c : task.target)
            c = v.charset[static_cast<std::size_t>(master.uniform_int(36))];
        task.w = 3 + master.uniform_int(5);
        const int h_min = (len + task.w - 1) / task.w;
        const int h_max = std::min(kMaxCells / task.w, v.max_grid);
        task.h = h_min + master.uniform_int(h_max - h_min + 1);
        task.fill_code = fill;
        task.seed = master.next_u64();

        SftExample ex;
        ex.grid = clean_grid(task);
        ex.task = task;
        Rng corrupt = Rng::stream(task.seed, {0x636f7272ULL});
        for (int& code : ex.grid.codes)
            if (corrupt.uniform01() < noise_rate)
                code = noise[static_cast<std::size_t>(corrupt.uniform_int(static_cast<int>(noise.size())))];
        out.push_back(std::move(ex));
    }
    return out;
}

void save_dataset(const std::vector<SftExample>& ds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_dataset: cannot open '" + path + "'");
    for (const SftExample& ex : ds) {
        json j{{"target", ex.task.target}, {"h", ex.task.h},       {"w", ex.task.w},
               {"fill", ex.task.fill_code}, {"seed", ex.task.seed}, {"codes", ex.grid.codes}};
        f << j.dump() << '\n';
    }
    if (!f) throw IoError("save_dataset: write failed for '" + path + "'");
}

std::vector<SftExample> load_dataset(const std::string& path, const VocabLayout& v) {
    std::ifstream f(path);
    if (!f) throw IoError("load_dataset: cannot open '" + path + "'");
    std::vector<SftExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("load_dataset: bad JSON at line " + std::to_string(lineno) + ": " +
                          e.what());
        }
        SftExample ex;
        try {
            ex.task.target = j.at("target").get<std::string>();
            ex.task.h = j.at("h").get<int>();
            ex.task.w = j.at("w").get<int>();
            ex.task.fill_code = j.at("fill").get<int>();
            ex.task.seed = j.at("seed").get<std::uint64_t>();
            ex.grid.codes = j.at("codes").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw IoError("load_dataset: missing field at line " + std::to_string(lineno) + ": " +
                          e.what());
        }
        ex.grid.h = ex.task.h;
        ex.grid.w = ex.task.w;
        validate_grid(ex.grid, v);
        out.push_back(std::move(ex));
    }
    return out;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

DatasetSplit split_dataset(const std::vector<SftExample>& ds, int eval_mod) {
    if (eval_mod < 2) throw ConfigError("split_dataset: eval_mod must be >= 2");
    DatasetSplit sp;
    for (const SftExample& ex : ds) {
        if (fnv1a(ex.task.target) % static_cast<std::uint64_t>(eval_mod) == 0)
            sp.eval.push_back(ex);
        else
            sp.train.push_back(ex);
    }
    return sp;
}

double cosine_lr(double lr0, int t, int total) {
    if (total < 1) throw ConfigError("cosine_lr: total must be >= 1");
    if (t < 0) throw ConfigError("cosine_lr: negative step");
    if (t >= total) return 0.0;
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

// ---- config ----

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "data.n", "data.noise_rate", "data.seed",
        "prompt_len", "atlas.seed",
        "policy.embed_dim", "policy.n_heads", "policy.n_core", "policy.n_pre", "policy.n_post",
        "policy.ffn_mult", "policy.max_seq", "policy.seed", "policy.predict_eom",
        "sft.steps", "sft.batch", "sft.lr", "sft.seed", "sft.prompt_dropout", "sft.log_every",
        "sft.overfit_one",
        "rl.steps", "rl.group", "rl.prompts", "rl.lr", "rl.clip_eps", "rl.kl_beta", "rl.seed",
        "rl.adv_std_floor", "rl.per_token_ratio", "rl.kl_per_token_mean", "rl.eval_every",
        "rl.ckpt_every", "rl.eval_prompts", "rl.eval_samples", "rl.temperature", "rl.top_k",
        "reward.ocr", "reward.alignment", "reward.aesthetic",
        "eval.samples_per_prompt", "eval.seed",
    };
    return keys;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::defaults() {
    Config c;
    c.kv = {
        {"data.n", "512"}, {"data.noise_rate", "0.35"}, {"data.seed", "11"},
        {"prompt_len", "12"}, {"atlas.seed", "7"},
        {"policy.embed_dim", "32"}, {"policy.n_heads", "4"}, {"policy.n_core", "4"},
        {"policy.n_pre", "1"}, {"policy.n_post", "1"}, {"policy.ffn_mult", "4"},
        {"policy.max_seq", "64"}, {"policy.seed", "1"}, {"policy.predict_eom", "false"},
        {"sft.steps", "2000"}, {"sft.batch", "16"}, {"sft.lr", "0.003"}, {"sft.seed", "2"},
        {"sft.prompt_dropout", "0.1"}, {"sft.log_every", "10"}, {"sft.overfit_one", "false"},
        {"rl.steps", "150"}, {"rl.group", "16"}, {"rl.prompts", "8"}, {"rl.lr", "0.0003"},
        {"rl.clip_eps", "0.2"}, {"rl.kl_beta", "0.01"}, {"rl.seed", "3"},
        {"rl.adv_std_floor", "1e-6"}, {"rl.per_token_ratio", "false"},
        {"rl.kl_per_token_mean", "true"}, {"rl.eval_every", "25"}, {"rl.ckpt_every", "50"},
        {"rl.eval_prompts", "24"}, {"rl.eval_samples", "2"}, {"rl.temperature", "1.0"},
        {"rl.top_k", "0"},
        {"reward.ocr", "0.4"}, {"reward.alignment", "0.3"}, {"reward.aesthetic", "0.3"},
        {"eval.samples_per_prompt", "4"}, {"eval.seed", "9"},
    };
    return c;
}

Config Config::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open '" + path + "'");
    Config c = defaults();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
        c.kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    c.validate_known();
    return c;
}

void Config::apply_set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string key = trim(assignment.substr(0, eq));
    if (known_keys().count(key) == 0) throw ConfigError("config: unknown key '" + key + "'");
    kv[key] = trim(assignment.substr(eq + 1));
}

void Config::validate_known() const {
    for (const auto& [k, _] : kv)
        if (known_keys().count(k) == 0) throw ConfigError("config: unknown key '" + k + "'");
}

std::string Config::get_str(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("config: missing key '" + key + "'");
    return it->second;
}

int Config::get_int(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        std::size_t pos = 0;
        const int x = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer: '" + s + "'");
    }
}

double Config::get_double(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        std::size_t pos = 0;
        const double x = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not a number: '" + s + "'");
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string s = get_str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + s + "'");
}

std::uint64_t Config::get_u64(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        std::size_t pos = 0;
        const std::uint64_t x = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an unsigned integer: '" + s + "'");
    }
}

PolicyConfig Config::policy_config() const {
    PolicyConfig pc;
    pc.embed_dim = get_int("policy.embed_dim");
    pc.n_heads = get_int("policy.n_heads");
    pc.n_core_blocks = get_int("policy.n_core");
    pc.n_vision_pre = get_int("policy.n_pre");
    pc.n_vision_post = get_int("policy.n_post");
    pc.ffn_mult = get_int("policy.ffn_mult");
    pc.max_seq_len = get_int("policy.max_seq");
    pc.seed = get_u64("policy.seed");
    pc.predict_eom = get_bool("policy.predict_eom");
    pc.validate();
    return pc;
}

GrpoConfig Config::grpo_config() const {
    GrpoConfig g;
    g.group_size = get_int("rl.group");
    g.clip_eps = get_double("rl.clip_eps");
    g.kl_beta = get_double("rl.kl_beta");
    g.lr = get_double("rl.lr");
    g.steps = get_int("rl.steps");
    g.prompts_per_step = get_int("rl.prompts");
    g.adv_std_floor = get_double("rl.adv_std_floor");
    g.seed = get_u64("rl.seed");
    g.per_token_ratio = get_bool("rl.per_token_ratio");
    g.kl_per_token_mean = get_bool("rl.kl_per_token_mean");
    g.validate();
    return g;
}

std::vector<RewardSpec> Config::reward_specs() const {
    return rewards_from_weights({{"ocr", get_double("reward.ocr")},
                                 {"alignment", get_double("reward.alignment")},
                                 {"aesthetic", get_double("reward.aesthetic")}});
}

// ---- run directory plumbing ----

DirLock::DirLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir + "/LOCK";
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
        throw IoError("output directory '" + dir + "' is locked (LOCK file exists)");
    std::fputs("locked\n", f);
    std::fclose(f);
}

DirLock::~DirLock() { std::remove(path_.c_str()); }

void write_manifest(const std::string& dir, const Config& cfg,
                    const std::vector<std::string>& outputs) {
    json j;
    j["config"] = cfg.kv;
    j["code_version"] = GLYPHRL_GIT_REV;
    j["outputs"] = outputs;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("write_manifest: cannot open '" + dir + "/manifest.json'");
    f << j.dump(2) << '\n';
    if (!f) throw IoError("write_manifest: write failed");
}

// ---- SFT ----

namespace {

struct PreparedExample {
    TokenSeq seq;             // full supervised sequence
    TokenSeq seq_dropped;     // prompt replaced by a single PAD
    std::vector<bool> mask;
    std::vector<bool> mask_dropped;
    std::string id;
};

std::vector<int> shuffled_indices(int n, Rng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        const int j = rng.uniform_int(i + 1);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

}  // namespace

SftRunReport run_sft(const Config& cfg, const std::vector<SftExample>& dataset,
                     const GlyphAtlas& atlas, const std::string& out_dir) {
    (void)atlas;
    if (dataset.empty()) throw ConfigError("run_sft: empty dataset");
    DirLock lock(out_dir);
    const VocabLayout v = VocabLayout::make();
    PolicyModel model(cfg.policy_config(), v);
    const int prompt_len = cfg.get_int("prompt_len");
    const bool overfit_one = cfg.get_bool("sft.overfit_one");
    const double dropout = overfit_one ? 0.0 : cfg.get_double("sft.prompt_dropout");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw ConfigError("run_sft: sft.prompt_dropout must lie in [0,1)");
    const int steps = cfg.get_int("sft.steps");
    const int batch_size = cfg.get_int("sft.batch");
    const double lr0 = cfg.get_double("sft.lr");
    const std::uint64_t seed = cfg.get_u64("sft.seed");
    if (steps < 1 || batch_size < 1) throw ConfigError("run_sft: steps/batch must be >= 1");

    const MaskOptions mopt{cfg.policy_config().predict_eom};
    std::vector<PreparedExample> prepared;
    const int n_used = overfit_one ? 1 : static_cast<int>(dataset.size());
    prepared.reserve(static_cast<std::size_t>(n_used));
    for (int i = 0; i < n_used; ++i) {
        const SftExample& ex = dataset[static_cast<std::size_t>(i)];
        PreparedExample pe;
        pe.seq = embed_grid(task_prompt_tokens(ex.task, v, prompt_len), ex.grid, v);
        pe.seq_dropped = embed_grid({v.pad}, ex.grid, v);
        pe.mask = modality_mask(pe.seq, v, Supervise::Image, mopt);
        pe.mask_dropped = modality_mask(pe.seq_dropped, v, Supervise::Image, mopt);
        pe.id = ex.task.target + "#" + std::to_string(i);
        prepared.push_back(std::move(pe));
    }

    std::ofstream log(out_dir + "/sft_loss.jsonl");
    if (!log) throw IoError("run_sft: cannot open loss log");
    const int log_every = cfg.get_int("sft.log_every");
    if (log_every < 1) throw ConfigError("run_sft: sft.log_every must be >= 1");

    SftRunReport report;
    std::vector<int> order;
    std::size_t cursor = 0;
    int epoch = 0;
    int divergent_streak = 0;
    for (int t = 0; t < steps; ++t) {
        std::vector<SftItem> items;
        items.reserve(static_cast<std::size_t>(batch_size));
        Rng drop_rng = Rng::stream(seed, {0x64726f70ULL, static_cast<std::uint64_t>(t)});
        for (int b = 0; b < batch_size; ++b) {
            if (cursor >= order.size()) {
                Rng order_rng =
                    Rng::stream(seed, {0x6f726465ULL, static_cast<std::uint64_t>(epoch)});
                order = shuffled_indices(n_used, order_rng);
                cursor = 0;
                ++epoch;
            }
            const PreparedExample& pe = prepared[static_cast<std::size_t>(order[cursor++])];
            const bool dropped = drop_rng.uniform01() < dropout;
            items.push_back(SftItem{dropped ? pe.seq_dropped : pe.seq,
                                    dropped ? pe.mask_dropped : pe.mask, pe.id});
        }
        const double lr = cosine_lr(lr0, t, steps);
        const SftReport sr = sft_step(model, items, lr);
        if (t == 0) report.initial_loss = sr.loss;
        report.final_loss = sr.loss;
        report.steps_run = t + 1;
        if (t % log_every == 0 || t + 1 == steps)
            log << json{{"step", t}, {"loss", sr.loss}, {"lr", lr}, {"tokens", sr.token_count}}
                       .dump()
                << '\n';
        divergent_streak = sr.loss > 2.0 * report.initial_loss ? divergent_streak + 1 : 0;
        if (divergent_streak >= 100) {
            report.aborted = true;
            throw NumericError("run_sft: loss exceeded twice its initial value for 100 "
                               "consecutive steps (diverged at step " +
                               std::to_string(t) + ")");
        }
    }
    report.checkpoint_path = out_dir + "/sft.ckpt";
    save_checkpoint(model, report.checkpoint_path);
    write_manifest(out_dir, cfg, {"sft.ckpt", "sft_loss.jsonl"});
    return report;
}

// ---- evaluation helpers ----

std::vector<ToyTask> tasks_of(const std::vector<SftExample>& ds) {
    std::vector<ToyTask> tasks;
    tasks.reserve(ds.size());
    for (const SftExample& ex : ds) tasks.push_back(ex.task);
    return tasks;
}

CodeGrid PolicySampler::sample(const ToyTask& task, std::uint64_t seed) const {
    if (!model) throw ConfigError("PolicySampler: no model");
    SamplerConfig sc;
    sc.temperature = temperature;
    sc.top_k = top_k;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    const SampleResult s =
        sample_grid(*model, task_prompt_tokens(task, model->vocab(), prompt_len), task.h, task.w, sc);
    return s.completed ? s.grid : CodeGrid{};
}

CodeGrid OracleSampler::sample(const ToyTask& task, std::uint64_t) const {
    return clean_grid(task);
}

CodeGrid RandomSampler::sample(const ToyTask& task, std::uint64_t seed) const {
    if (n_codes < 1) throw ConfigError("RandomSampler: n_codes unset");
    Rng rng = Rng::stream(seed, {0x726e6400ULL});
    CodeGrid g;
    g.h = task.h;
    g.w = task.w;
    g.codes.resize(static_cast<std::size_t>(task.h) * task.w);
    for (int& c : g.codes)
        c = rng.uniform_int(n_codes);
    return g;
}

TextAccuracyReport eval_text_accuracy(const GridSampler& sampler,
                                      const std::vector<ToyTask>& tasks,
                                      const GlyphAtlas& atlas, const VocabLayout& v,
                                      int samples_per_prompt, std::uint64_t seed) {
    if (tasks.empty()) throw ConfigError("eval_text_accuracy: no tasks");
    if (samples_per_prompt < 1) throw ConfigError("eval_text_accuracy: need >= 1 sample");
    const int n = static_cast<int>(tasks.size());
    std::vector<double> per_prompt(static_cast<std::size_t>(n), 0.0);
    std::vector<std::string> errors(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        try {
            double acc = 0.0;
            for (int s = 0; s < samples_per_prompt; ++s) {
                const std::uint64_t ss =
                    Rng::stream(seed, {0x74657874ULL, static_cast<std::uint64_t>(i),
                                       static_cast<std::uint64_t>(s)})
                        .next_u64();
                const CodeGrid grid = sampler.sample(tasks[i], ss);
                std::string pred;
                if (!grid.codes.empty())
                    pred = toy_ocr(render(grid, atlas), atlas, v).text;
                acc += ocr_accuracy(pred, tasks[i].target);
            }
            per_prompt[i] = acc / static_cast<double>(samples_per_prompt);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    for (int i = 0; i < n; ++i)
        if (!errors[i].empty())
            throw NumericError("eval_text_accuracy: prompt " + std::to_string(i) + " failed: " +
                               errors[i]);

    TextAccuracyReport rep;
    rep.per_prompt = per_prompt;
    double sum = 0.0, short_sum = 0.0, long_sum = 0.0;
    int short_n = 0, long_n = 0;
    for (int i = 0; i < n; ++i) {
        sum += per_prompt[i];
        if (static_cast<int>(tasks[i].target.size()) >= kLongTargetLen) {
            long_sum += per_prompt[i];
            ++long_n;
        } else {
            short_sum += per_prompt[i];
            ++short_n;
        }
    }
    rep.overall = sum / static_cast<double>(n);
    rep.short_mean = short_n ? short_sum / static_cast<double>(short_n) : 0.0;
    rep.long_mean = long_n ? long_sum / static_cast<double>(long_n) : 0.0;
    return rep;
}

double eval_mean_reward(const PolicyModel& model, const std::vector<ToyTask>& tasks,
                        const RolloutEnv& env, int prompt_len, std::uint64_t seed) {
    if (tasks.empty()) throw ConfigError("eval_mean_reward: no tasks");
    const int n = static_cast<int>(tasks.size());
    std::vector<double> rewards(static_cast<std::size_t>(n), 0.0);
    std::vector<std::string> errors(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        try {
            const RolloutPrompt rp = to_rollout_prompt(tasks[i], model.vocab(), prompt_len);
            const std::uint64_t ss =
                Rng::stream(seed, {0x6576616cULL, static_cast<std::uint64_t>(i)}).next_u64();
            rewards[i] = rollout_one(model, nullptr, rp, env, ss).reward;
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    for (int i = 0; i < n; ++i)
        if (!errors[i].empty())
            throw NumericError("eval_mean_reward: prompt " + std::to_string(i) + " failed: " +
                               errors[i]);
    double sum = 0.0;
    for (double r : rewards) sum += r;
    return sum / static_cast<double>(n);
}

std::vector<CfgSweepRow> eval_cfg_sweep(const PolicyModel& model,
                                        const std::vector<ToyTask>& tasks,
                                        const std::vector<double>& scales,
                                        const RolloutEnv& env, int prompt_len,
                                        int samples_per_prompt, std::uint64_t seed) {
    if (tasks.empty()) throw ConfigError("eval_cfg_sweep: no tasks");
    if (scales.empty()) throw ConfigError("eval_cfg_sweep: no scales");
    if (samples_per_prompt < 1) throw ConfigError("eval_cfg_sweep: need >= 1 sample");
    const int n = static_cast<int>(tasks.size());
    std::vector<CfgSweepRow> rows;
    rows.reserve(scales.size());
    for (const double scale : scales) {
        RolloutEnv e = env;
        e.cfg_scale = scale;
        const int total = n * samples_per_prompt;
        std::vector<double> rewards(static_cast<std::size_t>(total), 0.0);
        std::vector<std::string> errors(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(static)
        for (int f = 0; f < total; ++f) {
            const int i = f / samples_per_prompt, s = f % samples_per_prompt;
            try {
                const RolloutPrompt rp = to_rollout_prompt(tasks[i], model.vocab(), prompt_len);
                // Seed ignores the scale, so every row replays the same draws.
                const std::uint64_t ss =
                    Rng::stream(seed, {0x63666700ULL, static_cast<std::uint64_t>(i),
                                       static_cast<std::uint64_t>(s)})
                        .next_u64();
                rewards[f] = rollout_one(model, nullptr, rp, e, ss).reward;
            } catch (const std::exception& ex) {
                errors[f] = ex.what();
            }
        }
        for (int f = 0; f < total; ++f)
            if (!errors[f].empty())
                throw NumericError("eval_cfg_sweep: sample failed: " + errors[f]);
        double sum = 0.0;
        for (double r : rewards) sum += r;
        rows.push_back(CfgSweepRow{scale, sum / static_cast<double>(total)});
    }
    return rows;
}

// ---- RL ----

RlRunReport run_rl(const Config& cfg, const std::string& sft_checkpoint,
                   const std::vector<SftExample>& dataset, const GlyphAtlas& atlas,
                   const std::string& out_dir) {
    DirLock lock(out_dir);
    const VocabLayout v = VocabLayout::make();
    PolicyModel policy = load_checkpoint(sft_checkpoint);
    const PolicyModel ref = load_checkpoint(sft_checkpoint);
    PolicyTriple triple = make_triple(policy, ref);

    const int prompt_len = cfg.get_int("prompt_len");
    const GrpoConfig gcfg = cfg.grpo_config();
    RolloutEnv env;
    env.atlas = &atlas;
    env.rewards = cfg.reward_specs();
    env.temperature = cfg.get_double("rl.temperature");
    env.top_k = cfg.get_int("rl.top_k");

    const DatasetSplit split = split_dataset(dataset);
    if (split.train.empty() || split.eval.empty())
        throw ConfigError("run_rl: dataset split left train or eval empty");
    std::vector<RolloutPrompt> train_prompts;
    train_prompts.reserve(split.train.size());
    for (const SftExample& ex : split.train)
        train_prompts.push_back(to_rollout_prompt(ex.task, v, prompt_len));
    std::vector<ToyTask> eval_tasks = tasks_of(split.eval);
    const int eval_cap = cfg.get_int("rl.eval_prompts");
    if (static_cast<int>(eval_tasks.size()) > eval_cap)
        eval_tasks.resize(static_cast<std::size_t>(eval_cap));

    const int eval_every = cfg.get_int("rl.eval_every");
    const int ckpt_every = cfg.get_int("rl.ckpt_every");
    const std::uint64_t eval_seed = cfg.get_u64("eval.seed");
    const int ta_samples = cfg.get_int("eval.samples_per_prompt");

    RlRunReport report;
    report.metrics_path = out_dir + "/metrics.jsonl";
    report.eval_path = out_dir + "/eval.jsonl";
    report.checkpoint_path = out_dir + "/rl.ckpt";
    std::ofstream metrics(report.metrics_path);
    std::ofstream evals(report.eval_path);
    if (!metrics || !evals) throw IoError("run_rl: cannot open output logs");

    double sft_single = 0.0, sft_bon16 = 0.0, sft_ta_long = 0.0, sft_ta_overall = 0.0;
    if (gcfg.steps > 0) {
        // Baselines use the frozen reference (== the SFT checkpoint).
        sft_single = eval_mean_reward(ref, eval_tasks, env, prompt_len, eval_seed);
        const int ne = static_cast<int>(eval_tasks.size());
        std::vector<double> bon(static_cast<std::size_t>(ne), 0.0);
        std::vector<std::string> errors(static_cast<std::size_t>(ne));
#pragma omp parallel for schedule(static)
        for (int i = 0; i < ne; ++i) {
            try {
                const RolloutPrompt rp = to_rollout_prompt(eval_tasks[i], v, prompt_len);
                const std::uint64_t bs =
                    Rng::stream(eval_seed, {0x626f6e00ULL, static_cast<std::uint64_t>(i)})
                        .next_u64();
                bon[i] = best_of_n(ref, rp, 16, env, bs).best_reward;
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
        for (int i = 0; i < ne; ++i)
            if (!errors[i].empty()) throw NumericError("run_rl: baseline failed: " + errors[i]);
        double bsum = 0.0;
        for (double b : bon) bsum += b;
        sft_bon16 = bsum / static_cast<double>(ne);
        PolicySampler ps;
        ps.model = &ref;
        ps.prompt_len = prompt_len;
        ps.temperature = env.temperature;
        ps.top_k = env.top_k;
        const TextAccuracyReport sft_ta =
            eval_text_accuracy(ps, eval_tasks, atlas, v, ta_samples, eval_seed);
        sft_ta_long = sft_ta.long_mean;
        sft_ta_overall = sft_ta.overall;
    }

    for (int t = 0; t < gcfg.steps; ++t) {
        std::vector<RolloutPrompt> batch;
        batch.reserve(static_cast<std::size_t>(gcfg.prompts_per_step));
        for (int i = 0; i < gcfg.prompts_per_step; ++i)
            batch.push_back(
                train_prompts[(static_cast<std::size_t>(t) * gcfg.prompts_per_step + i) %
                              train_prompts.size()]);
        const StepReport rep = train_step(triple, batch, env, gcfg, t);
        json line{{"step", rep.step},
                  {"mean_reward", rep.mean_reward},
                  {"max_reward", rep.max_reward},
                  {"kl", rep.kl},
                  {"clip_fraction", rep.clip_fraction},
                  {"ratio_min", rep.ratio_min},
                  {"ratio_max", rep.ratio_max},
                  {"loss", rep.loss}};
        for (const auto& [name, mean] : rep.component_means) line["comp_" + name] = mean;
        metrics << line.dump() << '\n';
        report.steps_run = t + 1;
        report.final_mean_reward = rep.mean_reward;

        if ((t + 1) % eval_every == 0 || t + 1 == gcfg.steps) {
            const double rl_reward = eval_mean_reward(policy, eval_tasks, env, prompt_len,
                                                      eval_seed);
            PolicySampler ps;
            ps.model = &policy;
            ps.prompt_len = prompt_len;
            ps.temperature = env.temperature;
            ps.top_k = env.top_k;
            const TextAccuracyReport ta =
                eval_text_accuracy(ps, eval_tasks, atlas, v, ta_samples, eval_seed);
            evals << json{{"step", t + 1},
                          {"rl_reward", rl_reward},
                          {"rl_text_acc", ta.overall},
                          {"rl_text_acc_short", ta.short_mean},
                          {"rl_text_acc_long", ta.long_mean},
                          {"sft_single", sft_single},
                          {"sft_bon16", sft_bon16},
                          {"sft_text_acc", sft_ta_overall},
                          {"sft_text_acc_long", sft_ta_long}}
                         .dump()
                  << '\n';
        }
        if (ckpt_every > 0 && (t + 1) % ckpt_every == 0 && t + 1 != gcfg.steps)
            save_checkpoint(policy, out_dir + "/rl_step" + std::to_string(t + 1) + ".ckpt");
    }

    save_checkpoint(policy, report.checkpoint_path);
    write_manifest(out_dir, cfg, {"rl.ckpt", "metrics.jsonl", "eval.jsonl"});
    return report;
}

}  // namespace glyphrl
