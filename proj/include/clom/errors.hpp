#pragma once

#include <stdexcept>
#include <string>

namespace clom {

// Shape or contract violation on a tensor operation.
struct DimError : std::invalid_argument {
    explicit DimError(const std::string& msg) : std::invalid_argument(msg) {}
};

// NaN/Inf production, degenerate norms, degenerate class relations, divergence.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value, rejected before any work is done.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Dataset or checkpoint file problem (bad magic, truncation, count mismatch).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace clom
