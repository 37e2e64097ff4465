#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace m2m {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Base class for all structured errors thrown by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Input data violates a documented precondition or invariant.
class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& what) : Error(what) {}
};

/// The grid model is structurally unusable (disconnected, missing ids, ...).
class ModelError : public Error {
public:
    explicit ModelError(const std::string& what) : Error(what) {}
};

/// A numerical routine failed (singular matrix, vanishing denominator, ...).
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error(what) {}
};

inline bool is_unlimited(double capacity) { return !(capacity < kInfinity); }

inline double finite_abs_or_zero(double v) { return std::isfinite(v) ? std::abs(v) : 0.0; }

inline bool nearly_equal(double a, double b, double rel = 1e-9, double abs_tol = 1e-12) {
    const double diff = std::abs(a - b);
    return diff <= abs_tol || diff <= rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace m2m
