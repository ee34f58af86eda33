#pragma once

#include <charconv>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace gml {

/// Invalid configuration, violated precondition, or malformed input content.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch between operands.
class DimensionError : public ConfigError {
public:
    explicit DimensionError(const std::string& msg) : ConfigError(msg) {}
};

/// NaN/Inf intermediate, diverged optimization, or failed numeric cross-check.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem-level failure (missing file, unwritable path).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shortest round-trip decimal form, so emitted CSV/JSON is reproducible
// byte for byte across runs.
inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
    return std::mt19937_64(seed);
}

} // namespace gml
