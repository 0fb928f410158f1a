#include "glyphrl/atlas.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"

namespace glyphrl {

bool GlyphAtlas::clashes(int class_a, int class_b) const {
    for (const auto& [a, b] : clash_pairs)
        if ((a == class_a && b == class_b) || (a == class_b && b == class_a)) return true;
    return false;
}

int GlyphAtlas::hamming(int code, const std::uint8_t* cell) const {
    const std::uint8_t* p = patch_bits(code);
    const int n = patch * patch;
    int d = 0;
    for (int i = 0; i < n; ++i) d += (p[i] != cell[i]) ? 1 : 0;
    return d;
}

std::vector<int> GlyphAtlas::codes_of_class(int c) const {
    std::vector<int> out;
    for (int i = 0; i < n_codes; ++i)
        if (cls[i] == c) out.push_back(i);
    return out;
}

int GlyphAtlas::code_for_char(int charset_index) const {
    for (int i = 0; i < n_codes; ++i)
        if (glyph_char[i] == charset_index) return i;
    return -1;
}

namespace {

int hamming_raw(const std::uint8_t* a, const std::uint8_t* b, int n) {
    int d = 0;
    for (int i = 0; i < n; ++i) d += (a[i] != b[i]) ? 1 : 0;
    return d;
}

}  // namespace

GlyphAtlas default_atlas(const VocabLayout& v, std::uint64_t seed) {
    constexpr int kPatch = 5;
    constexpr int kBits = kPatch * kPatch;
    // Glyph identities must survive one flipped pixel: every other pattern
    // stays at Hamming >= 3 from every glyph, and glyphs pairwise >= 7.
    constexpr int kGlyphGap = 7;
    constexpr int kOtherGap = 3;

    const int n_glyphs = 36;  // letters + digits from the charset head
    if (v.n_image < n_glyphs + 8)
        throw ConfigError("default_atlas: image vocabulary too small (" +
                          std::to_string(v.n_image) + ")");
    const int n_smudge = 4;

    GlyphAtlas a;
    a.patch = kPatch;
    a.n_codes = v.n_image;
    a.bits.assign(static_cast<std::size_t>(a.n_codes) * kBits, 0);
    a.cls.assign(a.n_codes, GlyphAtlas::kPlain);
    a.glyph_char.assign(a.n_codes, -1);
    a.clash_pairs = {{GlyphAtlas::kGlyph, GlyphAtlas::kSmudge},
                     {GlyphAtlas::kPlain, GlyphAtlas::kSmudge},
                     {GlyphAtlas::kOrnament, GlyphAtlas::kSmudge},
                     {GlyphAtlas::kSmudge, GlyphAtlas::kSmudge}};

    Rng rng = Rng::stream(seed, {0x61746c61ULL});
    std::vector<std::uint8_t> cand(kBits);
    const auto draw = [&]() {
        for (int i = 0; i < kBits; ++i) cand[i] = static_cast<std::uint8_t>(rng.next_u64() & 1u);
    };
    const auto glyph_gap_ok = [&](int upto) {
        for (int g = 0; g < std::min(upto, n_glyphs); ++g)
            if (hamming_raw(cand.data(), a.patch_bits(g), kBits) <
                ((upto <= n_glyphs) ? kGlyphGap : kOtherGap))
                return false;
        return true;
    };
    const auto distinct_ok = [&](int upto) {
        for (int c = 0; c < upto; ++c)
            if (hamming_raw(cand.data(), a.patch_bits(c), kBits) == 0) return false;
        return true;
    };

    // Code layout: [0,36) glyphs, 36 blank background, (36,252) textures in
    // alternating classes, [n-4,n) smudges.
    const int smudge_begin = a.n_codes - n_smudge;
    for (int code = 0; code < a.n_codes; ++code) {
        if (code == n_glyphs) continue;  // background stays all-zero
        int attempts = 0;
        for (;;) {
            if (++attempts > 200000)
                throw NumericError("default_atlas: pattern search failed for code " +
                                   std::to_string(code));
            draw();
            if (code < n_glyphs) {
                int pop = 0;
                for (auto b : cand) pop += b;
                if (pop < 5) continue;  // keep glyphs far from the blank patch
            }
            if (!glyph_gap_ok(code)) continue;
            if (!distinct_ok(code)) continue;
            break;
        }
        std::copy(cand.begin(), cand.end(),
                  a.bits.begin() + static_cast<std::size_t>(code) * kBits);
        if (code < n_glyphs) {
            a.cls[code] = GlyphAtlas::kGlyph;
            a.glyph_char[code] = code;  // charset puts A-Z0-9 first
        } else if (code >= smudge_begin) {
            a.cls[code] = GlyphAtlas::kSmudge;
        } else {
            a.cls[code] = (code % 2 == 1) ? GlyphAtlas::kPlain : GlyphAtlas::kOrnament;
        }
    }
    a.cls[n_glyphs] = GlyphAtlas::kPlain;  // blank background
    return a;
}

void save_atlas(const GlyphAtlas& a, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_atlas: cannot open '" + path + "'");
    f << "glyph-atlas v1\n";
    f << "patch " << a.patch << "\n";
    f << "codes " << a.n_codes << "\n";
    for (const auto& [x, y] : a.clash_pairs) f << "clash " << x << " " << y << "\n";
    const int n = a.patch * a.patch;
    for (int c = 0; c < a.n_codes; ++c) {
        f << "code " << c << " class " << a.cls[c];
        if (a.glyph_char[c] >= 0) f << " glyph " << a.glyph_char[c];
        f << " bits ";
        const std::uint8_t* p = a.patch_bits(c);
        for (int i = 0; i < n; ++i) f << (p[i] ? '1' : '0');
        f << "\n";
    }
    if (!f) throw IoError("save_atlas: write failed for '" + path + "'");
}

GlyphAtlas load_atlas(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_atlas: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "glyph-atlas v1")
        throw IoError("load_atlas: '" + path + "' is not an atlas file");
    GlyphAtlas a;
    bool have_patch = false, have_codes = false;
    int filled = 0;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "patch") {
            ss >> a.patch;
            have_patch = ss && a.patch > 0;
            if (!have_patch) throw IoError("load_atlas: bad patch line");
        } else if (key == "codes") {
            ss >> a.n_codes;
            have_codes = ss && a.n_codes > 0;
            if (!have_codes) throw IoError("load_atlas: bad codes line");
            if (!have_patch) throw IoError("load_atlas: patch must precede codes");
            a.bits.assign(static_cast<std::size_t>(a.n_codes) * a.patch * a.patch, 0);
            a.cls.assign(a.n_codes, GlyphAtlas::kPlain);
            a.glyph_char.assign(a.n_codes, -1);
        } else if (key == "clash") {
            int x = -1, y = -1;
            ss >> x >> y;
            if (!ss) throw IoError("load_atlas: bad clash line");
            a.clash_pairs.emplace_back(x, y);
        } else if (key == "code") {
            if (!have_codes) throw IoError("load_atlas: code before codes header");
            int c = -1;
            ss >> c;
            if (!ss || c < 0 || c >= a.n_codes) throw IoError("load_atlas: bad code index");
            std::string field;
            std::string bitstr;
            while (ss >> field) {
                if (field == "class") {
                    if (!(ss >> a.cls[c])) throw IoError("load_atlas: bad class field");
                } else if (field == "glyph") {
                    if (!(ss >> a.glyph_char[c])) throw IoError("load_atlas: bad glyph field");
                } else if (field == "bits") {
                    if (!(ss >> bitstr)) throw IoError("load_atlas: bad bits field");
                } else {
                    throw IoError("load_atlas: unknown field '" + field + "'");
                }
            }
            const int n = a.patch * a.patch;
            if (static_cast<int>(bitstr.size()) != n)
                throw IoError("load_atlas: bits length mismatch for code " + std::to_string(c));
            std::uint8_t* p = a.bits.data() + static_cast<std::size_t>(c) * n;
            for (int i = 0; i < n; ++i) {
                if (bitstr[i] != '0' && bitstr[i] != '1')
                    throw IoError("load_atlas: bits must be 0/1");
                p[i] = static_cast<std::uint8_t>(bitstr[i] - '0');
            }
            ++filled;
        } else {
            throw IoError("load_atlas: unknown record '" + key + "'");
        }
    }
    if (!have_patch || !have_codes || filled != a.n_codes)
        throw IoError("load_atlas: incomplete atlas in '" + path + "'");
    return a;
}

PixelGrid render(const CodeGrid& grid, const GlyphAtlas& atlas) {
    for (int c : grid.codes)
        if (c < 0 || c >= atlas.n_codes)
            throw RangeError("render: code " + std::to_string(c) + " outside atlas");
    const int p = atlas.patch;
    PixelGrid px;
    px.h = grid.h * p;
    px.w = grid.w * p;
    px.pix.assign(static_cast<std::size_t>(px.h) * px.w, 0);
    for (int r = 0; r < grid.h; ++r)
        for (int c = 0; c < grid.w; ++c) {
            const std::uint8_t* pb = atlas.patch_bits(grid.at(r, c));
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j) px.at(r * p + i, c * p + j) = pb[i * p + j];
        }
    return px;
}

OcrResult toy_ocr(const PixelGrid& px, const GlyphAtlas& atlas, const VocabLayout& v) {
    const int p = atlas.patch;
    if (px.h % p != 0 || px.w % p != 0)
        throw ProtocolError("pixel dims " + std::to_string(px.h) + "x" + std::to_string(px.w) +
                                " not divisible by patch " + std::to_string(p),
                            0);
    const int ch = px.h / p, cw = px.w / p;
    const int n = p * p;
    std::vector<std::uint8_t> cell(static_cast<std::size_t>(n));
    OcrResult out;
    for (int r = 0; r < ch; ++r) {
        for (int c = 0; c < cw; ++c) {
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j) cell[i * p + j] = px.at(r * p + i, c * p + j);
            int best = 0, best_d = atlas.hamming(0, cell.data());
            for (int code = 1; code < atlas.n_codes; ++code) {
                const int d = atlas.hamming(code, cell.data());
                if (d < best_d) {
                    best_d = d;
                    best = code;
                }
            }
            if (atlas.cls[best] == GlyphAtlas::kGlyph) {
                out.text.push_back(v.charset[static_cast<std::size_t>(atlas.glyph_char[best])]);
                out.confidence.push_back(1.0 - static_cast<double>(best_d) / n);
                out.cell_index.push_back(r * cw + c);
            }
        }
    }
    return out;
}

}  // namespace glyphrl
