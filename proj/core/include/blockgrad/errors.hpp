#pragma once

#include <stdexcept>
#include <string>

namespace blockgrad {

/// Shape or broadcast mismatch between tensors.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// API misuse (e.g. backward on a non-scalar loss).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Out-of-range index (class target, token id).
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& what) : std::out_of_range(what) {}
};

/// Invalid model/selector/data configuration value.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Optimizer/selector state desync (unknown layer name, stale snapshot).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

/// Config-file syntax error; carries the offending line when known.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Report generation over incompatible or missing run artifacts.
struct ReportError : std::runtime_error {
    explicit ReportError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when training hits a non-finite loss; carries diagnostics.
struct TrainAbort : std::runtime_error {
    long step;
    std::string diagnostics;
    TrainAbort(long step_, std::string diag, const std::string& what)
        : std::runtime_error(what), step(step_), diagnostics(std::move(diag)) {}
};

}  // namespace blockgrad
