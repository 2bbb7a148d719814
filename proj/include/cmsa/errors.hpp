#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cmsa {

/// Process exit codes shared by the CLI and the error hierarchy.
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    numeric = 4,
    verification = 5,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

/// Inconsistent shapes, widths, window sizes or config fields.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ExitCode::config, what) {}
};

/// An API called out of contract (backward on a non-scalar, CF at k=1, ...).
class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ExitCode::config, what) {}
};

/// Bad input data: labels out of range, negative variances, wrong record counts.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ExitCode::data, what) {}
};

/// Checkpoint written for a different model configuration.
class CompatibilityError : public Error {
public:
    explicit CompatibilityError(const std::string& what) : Error(ExitCode::config, what) {}
};

/// NaN/Inf in losses or gradients.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

}  // namespace cmsa
