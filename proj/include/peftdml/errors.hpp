#pragma once

#include <stdexcept>
#include <string>

namespace peftdml {

// Base for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes or lengths do not line up.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Numeric-domain violation (log of non-positive, sqrt of negative,
// division by zero, non-finite input, degenerate embedding norm).
struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// API contract violated by the caller (non-scalar objective, missing
// gradient, non-unit embedding, count mismatch).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// No modality available where at least one is required.
struct AvailabilityError : Error {
    explicit AvailabilityError(const std::string& msg) : Error(msg) {}
};

// Evaluation protocol cannot run as configured.
struct ProtocolError : Error {
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

// Filesystem / serialization failure.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace peftdml
