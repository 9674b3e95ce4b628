#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wassoed {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid input: bad sizes, out-of-range parameters, non-PSD matrices.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Operation requested on a measure of unsupported dimension (e.g. a CDF of a 2D measure).
class UnsupportedDimensionError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

/// Floating point breakdown: non-finite values, failed factorizations.
class NumericError : public Error {
public:
    using Error::Error;
};

/// All posterior weights vanished in floating point.
class DegenerateEvidenceError : public NumericError {
public:
    using NumericError::NumericError;
};

/// Problem too large for an exact solver.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Iterative solver stopped without meeting its tolerance.
class ConvergenceError : public NumericError {
public:
    ConvergenceError(const std::string& what, std::vector<double> history)
        : NumericError(what), history_(std::move(history)) {}

    const std::vector<double>& residual_history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

/// Malformed text input (CSV, config). `line` is 1-based, 0 when not applicable.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A fitted surrogate missed its accuracy threshold.
class SurrogateQualityError : public NumericError {
public:
    using NumericError::NumericError;
};

}  // namespace wassoed
