#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"

namespace wassoed {

/// Observation map G(x; theta). `eval` must be pure and thread-safe. When the
/// map is linear in x, `linear_operator(theta)` returns the d x n matrix A with
/// G(x; theta) = A x.
struct ForwardModel {
    using EvalFn = std::function<Vector(const Vector& x, const Vector& theta)>;
    using LinearFn = std::function<Matrix(const Vector& theta)>;

    std::string name;
    Eigen::Index input_dim = 0;
    Eigen::Index output_dim = 0;
    Eigen::Index design_dim = 0;
    EvalFn eval;
    LinearFn linear_operator;  // empty for nonlinear maps

    Vector operator()(const Vector& x, const Vector& theta) const {
        if (x.size() != input_dim) throw ArgumentError(name + ": input has wrong dimension");
        if (theta.size() != design_dim) throw ArgumentError(name + ": design has wrong dimension");
        Vector y = eval(x, theta);
        if (!y.allFinite()) throw NumericError(name + ": non-finite forward output");
        return y;
    }
    bool is_linear() const { return static_cast<bool>(linear_operator); }
};

}  // namespace wassoed
