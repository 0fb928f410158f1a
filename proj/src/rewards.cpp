#include "glyphrl/rewards.hpp"

#include <algorithm>
#include <cmath>

#include "glyphrl/errors.hpp"

namespace glyphrl {

int levenshtein(const std::string& a, const std::string& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double ocr_accuracy(const std::string& pred, const std::string& target) {
    if (target.empty()) throw ConfigError("ocr_accuracy: empty target");
    const double d = static_cast<double>(levenshtein(pred, target));
    return std::max(0.0, 1.0 - d / static_cast<double>(target.size()));
}

int PromptConstraints::active_count() const {
    int n = 0;
    if (!target.empty()) ++n;
    if (h > 0 && w > 0) ++n;
    if (fill_code >= 0) ++n;
    return n;
}

double alignment_reward(const CodeGrid& grid, const std::string& ocr_text,
                        const PromptConstraints& pc) {
    const int active = pc.active_count();
    if (active == 0) throw ConfigError("alignment_reward: no active constraints");
    int satisfied = 0;
    if (pc.h > 0 && pc.w > 0 && grid.h == pc.h && grid.w == pc.w) ++satisfied;
    if (pc.fill_code >= 0) {
        const std::size_t span = pc.target.size();
        bool ok = true;
        for (std::size_t i = span; i < grid.codes.size(); ++i)
            if (grid.codes[i] != pc.fill_code) {
                ok = false;
                break;
            }
        if (ok) ++satisfied;
    }
    if (!pc.target.empty() && ocr_text.find(pc.target) != std::string::npos) ++satisfied;
    return static_cast<double>(satisfied) / static_cast<double>(active);
}

double aesthetic_reward(const PixelGrid& pixels, const GlyphAtlas& atlas) {
    if (atlas.patch <= 0) throw ConfigError("aesthetic_reward: empty atlas");
    if (pixels.h <= 0 || pixels.w <= 0 || pixels.h % atlas.patch != 0 ||
        pixels.w % atlas.patch != 0)
        throw DimensionError("aesthetic_reward: pixel dims not a multiple of the patch size");
    const int ch = pixels.h / atlas.patch;
    const int cw = pixels.w / atlas.patch;
    const int pp = atlas.patch * atlas.patch;
    std::vector<std::uint8_t> cell(static_cast<std::size_t>(pp));
    std::vector<int> cls(static_cast<std::size_t>(ch) * cw);
    for (int r = 0; r < ch; ++r)
        for (int c = 0; c < cw; ++c) {
            int k = 0;
            for (int pr = 0; pr < atlas.patch; ++pr)
                for (int pc2 = 0; pc2 < atlas.patch; ++pc2)
                    cell[k++] = pixels.at(r * atlas.patch + pr, c * atlas.patch + pc2);
            int best = 0, best_d = atlas.hamming(0, cell.data());
            for (int code = 1; code < atlas.n_codes; ++code) {
                const int d = atlas.hamming(code, cell.data());
                if (d < best_d) {
                    best_d = d;
                    best = code;
                }
            }
            cls[static_cast<std::size_t>(r) * cw + c] = atlas.cls[best];
        }
    long pairs = 0, clashing = 0;
    for (int r = 0; r < ch; ++r)
        for (int c = 0; c < cw; ++c) {
            const int here = cls[static_cast<std::size_t>(r) * cw + c];
            if (c + 1 < cw) {
                ++pairs;
                if (atlas.clashes(here, cls[static_cast<std::size_t>(r) * cw + c + 1])) ++clashing;
            }
            if (r + 1 < ch) {
                ++pairs;
                if (atlas.clashes(here, cls[static_cast<std::size_t>(r + 1) * cw + c])) ++clashing;
            }
        }
    if (pairs == 0) return 1.0;
    return 1.0 - static_cast<double>(clashing) / static_cast<double>(pairs);
}

RewardReport aggregate(const std::vector<RewardSpec>& specs, const RewardContext& ctx,
                       std::string prompt_id, std::string trajectory_id) {
    if (specs.empty()) throw ConfigError("aggregate: no reward components");
    bool any_positive = false;
    for (const RewardSpec& s : specs) {
        if (s.name.empty()) throw ConfigError("aggregate: unnamed reward component");
        if (!(s.weight >= 0.0)) throw ConfigError("aggregate: negative weight for " + s.name);
        if (!s.fn) throw ConfigError("aggregate: missing evaluator for " + s.name);
        any_positive = any_positive || s.weight > 0.0;
    }
    if (!any_positive) throw ConfigError("aggregate: need at least one positive weight");

    RewardReport rep;
    rep.prompt_id = std::move(prompt_id);
    rep.trajectory_id = std::move(trajectory_id);
    rep.components.reserve(specs.size());
    for (const RewardSpec& s : specs) {
        ComponentScore cs{s.name, s.weight, 0.0, false};
        try {
            const double v = s.fn(ctx);
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                cs.failed = true;
            else
                cs.score = v;
        } catch (const std::exception&) {
            cs.failed = true;
        }
        rep.components.push_back(std::move(cs));
    }
    // Name-sorted accumulation keeps the total bit-identical under any
    // permutation of the spec list.
    std::sort(rep.components.begin(), rep.components.end(),
              [](const ComponentScore& a, const ComponentScore& b) {
                  if (a.name != b.name) return a.name < b.name;
                  if (a.weight != b.weight) return a.weight < b.weight;
                  return a.score < b.score;
              });
    double wsum = 0.0, wscore = 0.0;
    bool all_failed = true;
    for (const ComponentScore& cs : rep.components) {
        wsum += cs.weight;
        wscore += cs.weight * cs.score;
        all_failed = all_failed && cs.failed;
    }
    rep.all_failed = all_failed;
    rep.total = all_failed ? 0.0 : wscore / wsum;
    return rep;
}

namespace {

RewardSpec make_component(const std::string& name, double weight) {
    if (name == "ocr") {
        return {name, weight, [](const RewardContext& ctx) {
                    if (!ctx.ocr || !ctx.constraints)
                        throw RewardError("ocr: missing OCR output or constraints");
                    return ocr_accuracy(ctx.ocr->text, ctx.constraints->target);
                }};
    }
    if (name == "alignment") {
        return {name, weight, [](const RewardContext& ctx) {
                    if (!ctx.grid || !ctx.ocr || !ctx.constraints)
                        throw RewardError("alignment: missing grid, OCR output or constraints");
                    return alignment_reward(*ctx.grid, ctx.ocr->text, *ctx.constraints);
                }};
    }
    if (name == "aesthetic") {
        return {name, weight, [](const RewardContext& ctx) {
                    if (!ctx.pixels || !ctx.atlas)
                        throw RewardError("aesthetic: missing pixels or atlas");
                    return aesthetic_reward(*ctx.pixels, *ctx.atlas);
                }};
    }
    throw ConfigError("unknown reward component '" + name + "'");
}

}  // namespace

std::vector<RewardSpec> default_rewards(double w_ocr, double w_align, double w_aesthetic) {
    return {make_component("ocr", w_ocr), make_component("alignment", w_align),
            make_component("aesthetic", w_aesthetic)};
}

std::vector<RewardSpec> rewards_from_weights(
    const std::vector<std::pair<std::string, double>>& weights) {
    if (weights.empty()) throw ConfigError("rewards_from_weights: empty registry");
    std::vector<RewardSpec> out;
    out.reserve(weights.size());
    for (const auto& [name, w] : weights) out.push_back(make_component(name, w));
    return out;
}

}  // namespace glyphrl
