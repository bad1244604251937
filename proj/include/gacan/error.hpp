#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gacan {

/// Root of every exception the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Inputs that violate a documented precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Invalid run configuration (CLI exit code 2).
class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Malformed input file; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// An iterative method ran out of iterations; the last estimate is kept.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last_estimate)
        : Error(what), last_estimate_(last_estimate) {}
    double last_estimate() const noexcept { return last_estimate_; }

private:
    double last_estimate_;
};

class NumericError : public Error {
public:
    using Error::Error;
};

/// Misuse of an API contract (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

} // namespace gacan
