#include "glyphrl/codec.hpp"

#include <algorithm>

#include "glyphrl/errors.hpp"

namespace glyphrl {

namespace {

// 26 letters, 10 digits, space, 27 punctuation marks = 64 characters.
const std::string kFullCharset =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:;!?()[]{}<>+-*/=_#@%&'\"|";

constexpr int kDigitBase = 26;  // charset index of '0'

}  // namespace

VocabLayout VocabLayout::make(int n_text, int n_image, int max_grid) {
    if (n_text < 36 || n_text > static_cast<int>(kFullCharset.size()))
        throw ConfigError("VocabLayout: n_text must lie in [36," +
                          std::to_string(kFullCharset.size()) + "] so digits are representable");
    if (n_image < 1) throw ConfigError("VocabLayout: n_image must be positive");
    if (max_grid < 1) throw ConfigError("VocabLayout: max_grid must be positive");
    VocabLayout v;
    v.n_text = n_text;
    v.n_image = n_image;
    v.max_grid = max_grid;
    v.charset = kFullCharset.substr(0, static_cast<std::size_t>(n_text));
    const int base = n_text + n_image;
    v.som = base + 0;
    v.eom = base + 1;
    v.img = base + 2;
    v.bos = base + 3;
    v.eos = base + 4;
    v.pad = base + 5;
    return v;
}

TokenClass VocabLayout::token_class(Token t) const {
    if (is_text(t)) return TokenClass::Text;
    if (is_image(t)) return TokenClass::Image;
    if (is_special(t)) return TokenClass::Special;
    throw RangeError("token_class: id " + std::to_string(t) + " outside vocabulary of " +
                     std::to_string(vocab_size()));
}

int VocabLayout::image_code(Token t) const {
    if (!is_image(t)) throw RangeError("image_code: token " + std::to_string(t) + " is not an image token");
    return t - n_text;
}

Token VocabLayout::image_token(int code) const {
    if (code < 0 || code >= n_image)
        throw RangeError("image_token: code " + std::to_string(code) + " outside [0," +
                         std::to_string(n_image) + ")");
    return n_text + code;
}

char VocabLayout::text_char(Token t) const {
    if (!is_text(t)) throw RangeError("text_char: token " + std::to_string(t) + " is not a text token");
    return charset[static_cast<std::size_t>(t)];
}

Token VocabLayout::char_token(char c) const {
    const std::size_t pos = charset.find(c);
    if (pos == std::string::npos)
        throw RangeError(std::string("char_token: character '") + c + "' not in charset");
    return static_cast<Token>(pos);
}

int VocabLayout::dim_digits() const {
    int digits = 1;
    for (int x = max_grid; x >= 10; x /= 10) ++digits;
    return digits;
}

void validate_grid(const CodeGrid& g, const VocabLayout& v) {
    if (g.h < 1 || g.h > v.max_grid || g.w < 1 || g.w > v.max_grid)
        throw RangeError("grid dims " + std::to_string(g.h) + "x" + std::to_string(g.w) +
                         " outside [1," + std::to_string(v.max_grid) + "]");
    if (static_cast<int>(g.codes.size()) != g.h * g.w)
        throw DimensionError("grid has " + std::to_string(g.codes.size()) + " codes, expected " +
                             std::to_string(g.h * g.w));
    for (int c : g.codes)
        if (c < 0 || c >= v.n_image)
            throw RangeError("grid code " + std::to_string(c) + " outside [0," +
                             std::to_string(v.n_image) + ")");
}

TokenSeq encode_text(const std::string& s, const VocabLayout& v) {
    TokenSeq out;
    out.reserve(s.size());
    for (char c : s) out.push_back(v.char_token(c));
    return out;
}

std::string decode_text(const TokenSeq& toks, const VocabLayout& v) {
    std::string out;
    out.reserve(toks.size());
    for (Token t : toks) out.push_back(v.text_char(t));
    return out;
}

namespace {

void append_dim(TokenSeq& seq, int value, const VocabLayout& v) {
    const int width = v.dim_digits();
    std::string dec = std::to_string(value);
    while (static_cast<int>(dec.size()) < width) dec.insert(dec.begin(), '0');
    for (char c : dec) seq.push_back(kDigitBase + (c - '0'));
}

// Digit value of a token, or -1 when it is not a digit text token.
int digit_of(Token t) {
    if (t < kDigitBase || t > kDigitBase + 9) return -1;
    return t - kDigitBase;
}

}  // namespace

TokenSeq span_prefix(const TokenSeq& prompt, int h, int w, const VocabLayout& v) {
    if (h < 1 || h > v.max_grid || w < 1 || w > v.max_grid)
        throw RangeError("span_prefix: dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " outside [1," + std::to_string(v.max_grid) + "]");
    for (Token t : prompt)
        if (!v.is_text(t) && t != v.pad)
            throw RangeError("span_prefix: prompt token " + std::to_string(t) +
                             " is neither text nor padding");
    TokenSeq seq = prompt;
    seq.reserve(prompt.size() + 2 + 2 * v.dim_digits());
    seq.push_back(v.som);
    append_dim(seq, h, v);
    append_dim(seq, w, v);
    seq.push_back(v.img);
    return seq;
}

TokenSeq embed_grid(const TokenSeq& prompt, const CodeGrid& grid, const VocabLayout& v) {
    validate_grid(grid, v);
    TokenSeq seq = span_prefix(prompt, grid.h, grid.w, v);
    seq.reserve(seq.size() + grid.codes.size() + 1);
    for (int c : grid.codes) seq.push_back(v.image_token(c));
    seq.push_back(v.eom);
    return seq;
}

namespace {

int parse_dim(const TokenSeq& seq, std::size_t& p, const VocabLayout& v, const char* what) {
    const int width = v.dim_digits();
    int value = 0;
    for (int i = 0; i < width; ++i, ++p) {
        if (p >= seq.size())
            throw ProtocolError(std::string("sequence ends inside ") + what + " span", seq.size());
        const int d = digit_of(seq[p]);
        if (d < 0) throw ProtocolError(std::string("expected ") + what + " digit", p);
        value = value * 10 + d;
    }
    return value;
}

}  // namespace

ExtractResult extract_grid(const TokenSeq& seq, const VocabLayout& v) {
    for (std::size_t i = 0; i < seq.size(); ++i)
        if (seq[i] < 0 || seq[i] >= v.vocab_size())
            throw ProtocolError("token id outside vocabulary", i);

    ExtractResult out;
    std::size_t p = 0;
    while (p < seq.size() && (v.is_text(seq[p]) || seq[p] == v.pad)) {
        out.prompt.push_back(seq[p]);
        ++p;
    }
    if (p >= seq.size()) throw ProtocolError("missing start-of-image marker", seq.size());
    if (seq[p] != v.som) throw ProtocolError("expected start-of-image marker", p);
    out.som_pos = p;
    ++p;

    const std::size_t dim_pos = p;
    const int h = parse_dim(seq, p, v, "height");
    const int w = parse_dim(seq, p, v, "width");
    if (h < 1 || h > v.max_grid) throw ProtocolError("height out of range", dim_pos);
    if (w < 1 || w > v.max_grid)
        throw ProtocolError("width out of range", dim_pos + static_cast<std::size_t>(v.dim_digits()));

    if (p >= seq.size()) throw ProtocolError("sequence ends before image-start marker", seq.size());
    if (seq[p] != v.img) throw ProtocolError("expected image-start marker", p);
    out.img_pos = p;
    ++p;

    out.grid.h = h;
    out.grid.w = w;
    out.grid.codes.reserve(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h * w; ++i, ++p) {
        if (p >= seq.size()) throw ProtocolError("sequence ends inside image span", seq.size());
        if (!v.is_image(seq[p])) throw ProtocolError("expected image code", p);
        out.grid.codes.push_back(v.image_code(seq[p]));
    }
    if (p >= seq.size()) throw ProtocolError("sequence ends before end-of-image marker", seq.size());
    if (seq[p] != v.eom) throw ProtocolError("expected end-of-image marker", p);
    out.eom_pos = p;
    return out;
}

std::vector<bool> modality_mask(const TokenSeq& seq, const VocabLayout& v, Supervise which,
                                MaskOptions opt) {
    std::vector<bool> mask(seq.size(), false);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        switch (v.token_class(seq[i])) {
            case TokenClass::Text:
                mask[i] = which == Supervise::Text;
                break;
            case TokenClass::Image:
                mask[i] = which == Supervise::Image;
                break;
            case TokenClass::Special:
                mask[i] = which == Supervise::Image && opt.include_eom && seq[i] == v.eom;
                break;
        }
    }
    return mask;
}

}  // namespace glyphrl
