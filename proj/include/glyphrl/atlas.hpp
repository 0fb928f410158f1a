#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "glyphrl/codec.hpp"

namespace glyphrl {

// Binary pixel raster; row-major, one byte per pixel (0/1).
struct PixelGrid {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> pix;

    std::uint8_t at(int r, int c) const { return pix[static_cast<std::size_t>(r) * w + c]; }
    std::uint8_t& at(int r, int c) { return pix[static_cast<std::size_t>(r) * w + c]; }
    bool operator==(const PixelGrid& o) const = default;
};

// Deterministic stand-in for an image decoder: every image code owns a small
// binary patch plus a visual class used by the surface rewards.
struct GlyphAtlas {
    static constexpr int kGlyph = 0;     // renders a recognizable character
    static constexpr int kPlain = 1;     // background / quiet texture
    static constexpr int kOrnament = 2;  // decorative texture
    static constexpr int kSmudge = 3;    // visual defect; clashes with everything

    int patch = 0;    // patch side length in pixels
    int n_codes = 0;  // must match the image vocabulary
    std::vector<std::uint8_t> bits;            // n_codes * patch * patch
    std::vector<int> cls;                      // class per code
    std::vector<int> glyph_char;               // charset index per code, -1 if none
    std::vector<std::pair<int, int>> clash_pairs;  // unordered class pairs

    const std::uint8_t* patch_bits(int code) const {
        return bits.data() + static_cast<std::size_t>(code) * patch * patch;
    }
    bool clashes(int class_a, int class_b) const;
    int hamming(int code, const std::uint8_t* cell) const;
    std::vector<int> codes_of_class(int c) const;
    // Lowest code rendering the given charset index, or -1.
    int code_for_char(int charset_index) const;
};

// Procedural atlas over the full image vocabulary: one glyph code per
// letter/digit, a blank background code, textures, and a few smudge codes.
// Patterns are kept far apart in Hamming distance so a one-pixel defect
// cannot change any cell's identity.
GlyphAtlas default_atlas(const VocabLayout& v, std::uint64_t seed = 7);

void save_atlas(const GlyphAtlas& atlas, const std::string& path);
GlyphAtlas load_atlas(const std::string& path);

PixelGrid render(const CodeGrid& grid, const GlyphAtlas& atlas);

struct OcrResult {
    std::string text;                // characters from glyph cells, reading order
    std::vector<double> confidence;  // per emitted character, 1 = exact match
    std::vector<int> cell_index;     // flat cell index per emitted character
};

// Per-cell nearest-pattern match by Hamming distance over the whole atlas;
// cells whose winner is not a glyph emit nothing.
OcrResult toy_ocr(const PixelGrid& px, const GlyphAtlas& atlas, const VocabLayout& v);

}  // namespace glyphrl
