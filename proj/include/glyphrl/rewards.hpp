#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "glyphrl/atlas.hpp"
#include "glyphrl/codec.hpp"

namespace glyphrl {

int levenshtein(const std::string& a, const std::string& b);

// max(0, 1 - edit_distance/|target|); 1 iff pred == target.
double ocr_accuracy(const std::string& pred, const std::string& target);

// Structural constraints a prompt can declare. A constraint participates in
// scoring only when its field is set; the score is the satisfied fraction
// over participating constraints.
struct PromptConstraints {
    std::string target;  // must appear in the OCR text (active when non-empty)
    int h = 0;           // expected grid dims (active when both positive)
    int w = 0;
    int fill_code = -1;  // required in every cell past the text span (active when >= 0)

    int active_count() const;
};

double alignment_reward(const CodeGrid& grid, const std::string& ocr_text,
                        const PromptConstraints& pc);

// 1 - fraction of 4-neighbor cell pairs whose visual classes clash; cell
// identities are re-derived from pixels alone.
double aesthetic_reward(const PixelGrid& pixels, const GlyphAtlas& atlas);

// Evaluation inputs for one trajectory. Null grid/pixels/ocr mark a
// trajectory whose token stream failed to decode.
struct RewardContext {
    const CodeGrid* grid = nullptr;
    const PixelGrid* pixels = nullptr;
    const OcrResult* ocr = nullptr;
    const PromptConstraints* constraints = nullptr;
    const GlyphAtlas* atlas = nullptr;
};

using RewardFn = std::function<double(const RewardContext&)>;

struct RewardSpec {
    std::string name;
    double weight = 0.0;
    RewardFn fn;
};

struct ComponentScore {
    std::string name;
    double weight = 0.0;
    double score = 0.0;
    bool failed = false;
};

struct RewardReport {
    std::vector<ComponentScore> components;  // name-sorted
    double total = 0.0;
    bool all_failed = false;
    std::string prompt_id;
    std::string trajectory_id;
};

// Weighted mean over components. A component that throws or reports a score
// outside [0,1] contributes 0 and is flagged; the call itself never throws
// once the spec list has been validated.
RewardReport aggregate(const std::vector<RewardSpec>& specs, const RewardContext& ctx,
                       std::string prompt_id = {}, std::string trajectory_id = {});

std::vector<RewardSpec> default_rewards(double w_ocr = 0.4, double w_align = 0.3,
                                        double w_aesthetic = 0.3);

// Registry lookup by name; unknown names are rejected up front.
std::vector<RewardSpec> rewards_from_weights(
    const std::vector<std::pair<std::string, double>>& weights);

}  // namespace glyphrl
