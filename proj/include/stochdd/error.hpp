#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stochdd {

/// Thrown when a precondition on an argument is violated.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a factorization or eigen-decomposition fails (singular matrix, no convergence).
class NumericFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when an iterative scheme exhausts its iteration budget.
class NonConvergence : public std::runtime_error {
public:
    NonConvergence(const std::string& what, std::vector<double> history)
        : std::runtime_error(what), history_(std::move(history)) {}

    const std::vector<double>& history() const noexcept { return history_; }
    double last_residual() const noexcept { return history_.empty() ? 0.0 : history_.back(); }

private:
    std::vector<double> history_;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
    if (!condition) throw InvalidArgument(message);
}

} // namespace detail
} // namespace stochdd
