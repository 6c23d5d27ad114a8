#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace joulebench {

// A power sample that violates its invariants (e.g. negative watts).
struct InvalidSampleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An embedding that cannot be normalized (zero vector).
struct DegenerateEmbeddingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A supervised operation was asked to run on samples without labels.
struct MissingLabelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A live hardware backend is not available on this platform.
struct PlatformError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file; carries the 1-based line number.
struct ParseError : std::runtime_error {
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line(line) {}
    std::size_t line;
};

// Training produced a non-finite loss; carries the epoch it happened in.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, int epoch)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch(epoch) {}
    int epoch;
};

}  // namespace joulebench
