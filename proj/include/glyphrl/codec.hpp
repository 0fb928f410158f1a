#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace glyphrl {

using Token = int;
using TokenSeq = std::vector<Token>;

enum class TokenClass { Text, Image, Special };

// Token universe: [0,n_text) character tokens, [n_text,n_text+n_image) image
// codes, then six structural specials. Also carries the grid bound, which
// fixes the width of the decimal dimension spans in the wire format.
struct VocabLayout {
    int n_text = 0;
    int n_image = 0;
    int max_grid = 0;
    std::string charset;  // n_text characters; digits 0-9 required for dims
    Token som = 0, eom = 0, img = 0, bos = 0, eos = 0, pad = 0;

    static VocabLayout make(int n_text = 64, int n_image = 256, int max_grid = 8);

    int vocab_size() const { return n_text + n_image + 6; }
    bool is_text(Token t) const { return t >= 0 && t < n_text; }
    bool is_image(Token t) const { return t >= n_text && t < n_text + n_image; }
    bool is_special(Token t) const { return t >= n_text + n_image && t < vocab_size(); }
    TokenClass token_class(Token t) const;

    int image_code(Token t) const;    // token -> code index in [0, n_image)
    Token image_token(int code) const;
    char text_char(Token t) const;
    Token char_token(char c) const;

    // Fixed width of each dimension span: decimal digits of max_grid.
    int dim_digits() const;
};

// Row-major grid of image-code indices (not token ids).
struct CodeGrid {
    int h = 0;
    int w = 0;
    std::vector<int> codes;

    int at(int r, int c) const { return codes[static_cast<std::size_t>(r) * w + c]; }
    int& at(int r, int c) { return codes[static_cast<std::size_t>(r) * w + c]; }
    bool operator==(const CodeGrid& o) const = default;
};

// Throws RangeError/DimensionError when the grid violates layout bounds.
void validate_grid(const CodeGrid& g, const VocabLayout& v);

TokenSeq encode_text(const std::string& s, const VocabLayout& v);
std::string decode_text(const TokenSeq& toks, const VocabLayout& v);

// prompt ++ SOM ++ digits(h) ++ digits(w) ++ IMG: the forced part of a
// generation, up to but not including the image codes.
TokenSeq span_prefix(const TokenSeq& prompt, int h, int w, const VocabLayout& v);

// prompt ++ SOM ++ digits(h) ++ digits(w) ++ IMG ++ row-major codes ++ EOM.
// Prompt tokens must be text or PAD.
TokenSeq embed_grid(const TokenSeq& prompt, const CodeGrid& grid, const VocabLayout& v);

struct ExtractResult {
    TokenSeq prompt;  // tokens before the SOM marker
    CodeGrid grid;
    std::size_t som_pos = 0;
    std::size_t img_pos = 0;
    std::size_t eom_pos = 0;
};

// Strict parse of the first image span; ProtocolError carries the index of
// the first violating token. Tokens after EOM are ignored.
ExtractResult extract_grid(const TokenSeq& seq, const VocabLayout& v);

enum class Supervise { Text, Image };

struct MaskOptions {
    // Deterministic grid termination is the default, so the end marker is
    // normally not a prediction target.
    bool include_eom = false;
};

// mask[i] == true iff seq[i] belongs to the supervised class (EOM counts as
// image when opt.include_eom). Structural specials are never supervised.
std::vector<bool> modality_mask(const TokenSeq& seq, const VocabLayout& v, Supervise which,
                                MaskOptions opt = {});

}  // namespace glyphrl
