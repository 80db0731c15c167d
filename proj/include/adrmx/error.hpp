#pragma once

#include <stdexcept>
#include <string>

namespace adrmx {

/// Tensor shape / dimension mismatch.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid configuration value (sizes, fractions, unknown keys, ...).
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// An index (class label, domain id, row) outside its valid range.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& what) : std::out_of_range(what) {}
};

/// API contract violation (non-scalar loss, non-normalized rows, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Malformed binary input (bad magic, corrupted container).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Byte stream shorter or longer than its header promises.
struct LengthError : std::runtime_error {
    explicit LengthError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerically degenerate input (near-zero row norm, singular data).
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

/// NaN/Inf produced during training or op evaluation.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace adrmx
