#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glyphrl/errors.hpp"
#include "glyphrl/grad_check.hpp"
#include "glyphrl/harness.hpp"
#include "glyphrl/rng.hpp"
#include "glyphrl/vq.hpp"
#include "json.hpp"

namespace {

using namespace glyphrl;
using nlohmann::json;

std::string default_out() {
    const char* env = std::getenv("GLYPHRL_OUT");
    return env ? std::string(env) : std::string("out");
}

Config build_config(const std::string& config_path, const std::vector<std::string>& sets) {
    Config cfg = config_path.empty() ? Config::defaults() : Config::load(config_path);
    for (const std::string& s : sets) cfg.apply_set(s);
    cfg.validate_known();
    return cfg;
}

GlyphAtlas atlas_for(const Config& cfg, const VocabLayout& v) {
    return default_atlas(v, cfg.get_u64("atlas.seed"));
}

// Synthetic per-code feature clusters for fitting the codebook artifact.
Tensor codebook_features(int n_codes, int dim, int per_code, std::uint64_t seed) {
    Tensor f = Tensor::zeros({n_codes * per_code, dim});
    for (int c = 0; c < n_codes; ++c) {
        Rng base = Rng::stream(seed, {0x66656174ULL, static_cast<std::uint64_t>(c)});
        std::vector<double> center(static_cast<std::size_t>(dim));
        for (double& x : center) x = base.normal();
        for (int s = 0; s < per_code; ++s)
            for (int j = 0; j < dim; ++j)
                f.at(c * per_code + s, j) = center[static_cast<std::size_t>(j)] +
                                            0.05 * base.normal();
    }
    return f;
}

int cmd_gen_data(const Config& cfg, const std::string& out) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    DirLock lock(out);
    const int n = cfg.get_int("data.n");
    const std::vector<SftExample> ds =
        gen_dataset(n, cfg.get_double("data.noise_rate"), cfg.get_u64("data.seed"), v, atlas);
    save_dataset(ds, out + "/dataset.jsonl");
    save_atlas(atlas, out + "/atlas.txt");

    KmeansTrace trace;
    const Tensor feats = codebook_features(v.n_image, 16, 8, cfg.get_u64("data.seed"));
    const Codebook cb = fit_codebook(feats, v.n_image, 20, cfg.get_u64("data.seed"), &trace);
    save_codebook(cb, out + "/codebook.bin");
    write_manifest(out, cfg, {"dataset.jsonl", "atlas.txt", "codebook.bin"});

    // Invariant checks: bucket balance, round-trip, k-means monotonicity.
    std::map<std::size_t, int> buckets;
    for (const SftExample& ex : ds) ++buckets[ex.task.target.size()];
    int bmin = n, bmax = 0;
    for (const auto& [len, count] : buckets) {
        bmin = std::min(bmin, count);
        bmax = std::max(bmax, count);
    }
    if (bmax - bmin > 1) throw ConfigError("gen-data: length buckets differ by more than 1");
    if (load_dataset(out + "/dataset.jsonl", v).size() != ds.size())
        throw IoError("gen-data: dataset round-trip size mismatch");
    for (std::size_t i = 1; i < trace.objective.size(); ++i)
        if (trace.objective[i] > trace.objective[i - 1] + 1e-9)
            throw NumericError("gen-data: k-means objective increased");
    std::cout << "wrote " << ds.size() << " examples, atlas, codebook to " << out << "\n";
    return 0;
}

int cmd_sft(const Config& cfg, const std::string& data_path, const std::string& out) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    // Train on the hash-split train partition only; eval-* and rl treat the
    // complementary partition as held out.
    const std::vector<SftExample> ds = load_dataset(data_path, v);
    const SftRunReport rep = run_sft(cfg, split_dataset(ds).train, atlas, out);
    const PolicyModel reloaded = load_checkpoint(rep.checkpoint_path);
    if (!std::isfinite(rep.final_loss)) throw NumericError("sft: non-finite final loss");
    std::cout << "sft: steps=" << rep.steps_run << " initial_loss=" << rep.initial_loss
              << " final_loss=" << rep.final_loss << " params=" << reloaded.params().total_params()
              << " -> " << rep.checkpoint_path << "\n";
    return 0;
}

int cmd_rl(const Config& cfg, const std::string& ckpt, const std::string& data_path,
           const std::string& out) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    const std::vector<SftExample> ds = load_dataset(data_path, v);
    const RlRunReport rep = run_rl(cfg, ckpt, ds, atlas, out);
    std::ifstream m(rep.metrics_path);
    int lines = 0;
    for (std::string line; std::getline(m, line);)
        if (!line.empty()) ++lines;
    if (lines != rep.steps_run)
        throw IoError("rl: metrics line count " + std::to_string(lines) + " != steps " +
                      std::to_string(rep.steps_run));
    std::cout << "rl: steps=" << rep.steps_run << " final_mean_reward=" << rep.final_mean_reward
              << " -> " << rep.checkpoint_path << "\n";
    return 0;
}

int cmd_eval_text(const Config& cfg, const std::string& ckpt, const std::string& data_path,
                  const std::string& out) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    const PolicyModel model = load_checkpoint(ckpt);
    const DatasetSplit split = split_dataset(load_dataset(data_path, v));
    PolicySampler ps;
    ps.model = &model;
    ps.prompt_len = cfg.get_int("prompt_len");
    const TextAccuracyReport rep =
        eval_text_accuracy(ps, tasks_of(split.eval), atlas, v,
                           cfg.get_int("eval.samples_per_prompt"), cfg.get_u64("eval.seed"));
    const json j{{"overall", rep.overall}, {"short", rep.short_mean}, {"long", rep.long_mean}};
    std::filesystem::create_directories(out);
    std::ofstream f(out + "/eval_text.jsonl");
    if (!f) throw IoError("eval-text: cannot write to " + out);
    f << j.dump() << '\n';
    std::cout << j.dump() << "\n";
    if (!std::isfinite(rep.overall)) throw NumericError("eval-text: non-finite score");
    return 0;
}

int cmd_eval_cfg(const Config& cfg, const std::string& ckpt, const std::string& data_path,
                 const std::vector<double>& scales, const std::string& out) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    const PolicyModel model = load_checkpoint(ckpt);
    const DatasetSplit split = split_dataset(load_dataset(data_path, v));
    RolloutEnv env;
    env.atlas = &atlas;
    env.rewards = cfg.reward_specs();
    const std::vector<CfgSweepRow> rows =
        eval_cfg_sweep(model, tasks_of(split.eval), scales, env, cfg.get_int("prompt_len"),
                       cfg.get_int("rl.eval_samples"), cfg.get_u64("eval.seed"));
    std::filesystem::create_directories(out);
    std::ofstream f(out + "/cfg_sweep.jsonl");
    if (!f) throw IoError("eval-cfg: cannot write to " + out);
    for (const CfgSweepRow& r : rows) {
        const json j{{"scale", r.scale}, {"mean_reward", r.mean_reward}};
        f << j.dump() << '\n';
        std::cout << j.dump() << "\n";
    }
    if (rows.size() != scales.size()) throw ConfigError("eval-cfg: row count != scale count");
    return 0;
}

int cmd_bon(const Config& cfg, const std::string& ckpt, const std::string& data_path, int n) {
    const VocabLayout v = VocabLayout::make();
    const GlyphAtlas atlas = atlas_for(cfg, v);
    const PolicyModel model = load_checkpoint(ckpt);
    const DatasetSplit split = split_dataset(load_dataset(data_path, v));
    RolloutEnv env;
    env.atlas = &atlas;
    env.rewards = cfg.reward_specs();
    const std::vector<ToyTask> tasks = tasks_of(split.eval);
    double sum = 0.0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const RolloutPrompt rp = to_rollout_prompt(tasks[i], v, cfg.get_int("prompt_len"));
        const std::uint64_t seed =
            Rng::stream(cfg.get_u64("eval.seed"), {0x626f6e00ULL, static_cast<std::uint64_t>(i)})
                .next_u64();
        sum += best_of_n(model, rp, n, env, seed).best_reward;
    }
    const double mean = sum / static_cast<double>(tasks.size());
    std::cout << json{{"n", n}, {"mean_best_reward", mean}}.dump() << "\n";
    if (!std::isfinite(mean)) throw NumericError("bon: non-finite reward");
    return 0;
}

int cmd_grad_check(const Config& cfg) {
    const VocabLayout v = VocabLayout::make();
    PolicyConfig pc = cfg.policy_config();
    pc.n_core_blocks = 2;
    pc.n_vision_pre = 0;
    pc.n_vision_post = 0;
    const ToyTask task{"AB", 2, 3, 36, 0};
    const TokenSeq seq = embed_grid(task_prompt_tokens(task, v, 4), clean_grid(task), v);
    const std::vector<bool> mask = modality_mask(seq, v, Supervise::Image, {});
    PolicyModel checked(pc, v);
    auto f = [&](Tape& t, ParamStore& ps) {
        ParamStore saved = checked.params().clone_values();
        checked.params().copy_values_from(ps);
        Value hidden = checked.forward_hidden(t, TokenSeq(seq.begin(), seq.end() - 1));
        std::vector<int> rows, tgts;
        for (std::size_t i = 1; i < seq.size(); ++i)
            if (mask[i]) {
                rows.push_back(static_cast<int>(i) - 1);
                tgts.push_back(checked.image_head_index(seq[i]));
            }
        Value out = nll_sum(checked.image_logprobs_at(t, hidden, rows), tgts);
        checked.params().copy_values_from(saved);
        return out;
    };
    ParamStore params = checked.params().clone_values();
    const GradCheckReport rep = grad_check(f, params, 1e-5, 1e-3, 6, 1);
    std::cout << json{{"max_rel_err", rep.max_rel_err},
                      {"worst_param", rep.worst_param},
                      {"checked", rep.checked},
                      {"pass", rep.pass}}
                     .dump()
              << "\n";
    return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"glyph-grid policy training and evaluation"};
    app.require_subcommand(1);

    std::string config_path, out = default_out(), data_path, ckpt;
    std::vector<std::string> sets;
    std::vector<double> scales{1.0, 1.5, 2.0, 3.0};
    int bon_n = 16;
    app.add_option("--config", config_path, "config file (key=value lines)");
    app.add_option("--set", sets, "override config entries (key=value)")->take_all();
    app.add_option("--out", out, "output directory");

    CLI::App* gen = app.add_subcommand("gen-data", "generate dataset, atlas, codebook");
    CLI::App* sft = app.add_subcommand("sft", "supervised pretraining");
    sft->add_option("--data", data_path, "dataset JSONL")->required();
    CLI::App* rl = app.add_subcommand("rl", "policy-gradient training from a checkpoint");
    rl->add_option("--data", data_path, "dataset JSONL")->required();
    rl->add_option("--ckpt", ckpt, "starting checkpoint")->required();
    CLI::App* evt = app.add_subcommand("eval-text", "text accuracy on held-out prompts");
    evt->add_option("--data", data_path, "dataset JSONL")->required();
    evt->add_option("--ckpt", ckpt, "checkpoint")->required();
    CLI::App* evc = app.add_subcommand("eval-cfg", "reward vs guidance scale sweep");
    evc->add_option("--data", data_path, "dataset JSONL")->required();
    evc->add_option("--ckpt", ckpt, "checkpoint")->required();
    evc->add_option("--scales", scales, "guidance scales");
    CLI::App* bon = app.add_subcommand("bon", "best-of-N evaluation");
    bon->add_option("--data", data_path, "dataset JSONL")->required();
    bon->add_option("--ckpt", ckpt, "checkpoint")->required();
    bon->add_option("--n", bon_n, "samples per prompt");
    CLI::App* gc = app.add_subcommand("grad-check", "numeric gradient verification");
    for (CLI::App* sub : {gen, sft, rl, evt, evc, bon, gc}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        const Config cfg = build_config(config_path, sets);
        if (gen->parsed()) return cmd_gen_data(cfg, out);
        if (sft->parsed()) return cmd_sft(cfg, data_path, out);
        if (rl->parsed()) return cmd_rl(cfg, ckpt, data_path, out);
        if (evt->parsed()) return cmd_eval_text(cfg, ckpt, data_path, out);
        if (evc->parsed()) return cmd_eval_cfg(cfg, ckpt, data_path, scales, out);
        if (bon->parsed()) return cmd_bon(cfg, ckpt, data_path, bon_n);
        if (gc->parsed()) return cmd_grad_check(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
