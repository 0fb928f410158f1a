#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace glyphrl {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RangeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed multimodal sequence. `position` is the index of the first
// violating token (or the sequence length for truncation errors).
struct ProtocolError : std::runtime_error {
    std::size_t position;
    ProtocolError(const std::string& what, std::size_t pos)
        : std::runtime_error(what + " (position " + std::to_string(pos) + ")"), position(pos) {}
};

struct RewardError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace glyphrl
