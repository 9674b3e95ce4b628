#pragma once

// Gauss-Hermite, Gauss-Legendre and Clenshaw-Curtis rules, tensor products and
// Smolyak sparse-grid combinations.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"

namespace wassoed {

enum class RuleKind { GaussHermiteProbabilist, GaussLegendre, ClenshawCurtis, TensorProduct, SmolyakCombination };

inline const char* to_string(RuleKind k) {
    switch (k) {
        case RuleKind::GaussHermiteProbabilist: return "gauss-hermite";
        case RuleKind::GaussLegendre: return "gauss-legendre";
        case RuleKind::ClenshawCurtis: return "clenshaw-curtis";
        case RuleKind::TensorProduct: return "tensor";
        case RuleKind::SmolyakCombination: return "smolyak";
    }
    return "?";
}

/// Nodes are stored column-wise: nodes.col(i) is the i-th point.
struct QuadratureRule {
    Matrix nodes;
    Vector weights;
    RuleKind kind = RuleKind::GaussLegendre;
    int level = -1;  ///< Smolyak level, or -1 for non-sparse rules

    Eigen::Index dim() const { return nodes.rows(); }
    Eigen::Index size() const { return weights.size(); }
    double weight_sum() const { return weights.sum(); }
};

namespace detail {

// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights are mu0 * (first eigenvector component)^2.
inline QuadratureRule golub_welsch(const Vector& offdiag, double mu0, RuleKind kind) {
    const Eigen::Index n = offdiag.size() + 1;
    Matrix jac = Matrix::Zero(n, n);
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
        jac(k, k + 1) = offdiag(k);
        jac(k + 1, k) = offdiag(k);
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(jac);
    if (eig.info() != Eigen::Success) throw NumericError("Golub-Welsch eigensolve failed");
    QuadratureRule rule;
    rule.kind = kind;
    rule.nodes.resize(1, n);
    rule.weights.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        rule.nodes(0, i) = eig.eigenvalues()(i);
        const double v = eig.eigenvectors()(0, i);
        rule.weights(i) = mu0 * v * v;
    }
    // Symmetric weight functions: enforce exact node antisymmetry and weight symmetry.
    for (Eigen::Index i = 0; i < n / 2; ++i) {
        const Eigen::Index j = n - 1 - i;
        const double x = 0.5 * (rule.nodes(0, j) - rule.nodes(0, i));
        const double w = 0.5 * (rule.weights(i) + rule.weights(j));
        rule.nodes(0, i) = -x;
        rule.nodes(0, j) = x;
        rule.weights(i) = rule.weights(j) = w;
    }
    if (n % 2 == 1) rule.nodes(0, n / 2) = 0.0;
    return rule;
}

}  // namespace detail

/// n-point Gauss-Hermite rule for E[f(Z)], Z ~ N(0,1) (probabilists' weight, weights sum to 1).
inline QuadratureRule gauss_hermite(int n) {
    if (n < 1 || n > 512) throw ArgumentError("gauss_hermite: n must lie in [1, 512]");
    if (n == 1) return {Matrix::Zero(1, 1), Vector::Ones(1), RuleKind::GaussHermiteProbabilist, -1};
    Vector off(n - 1);
    for (int k = 1; k < n; ++k) off(k - 1) = std::sqrt(static_cast<double>(k));
    auto rule = detail::golub_welsch(off, 1.0, RuleKind::GaussHermiteProbabilist);
    rule.weights /= rule.weights.sum();
    return rule;
}

/// n-point Gauss-Legendre rule on [lower, upper] (weights sum to upper - lower).
inline QuadratureRule gauss_legendre(int n, double lower = -1.0, double upper = 1.0) {
    if (n < 1 || n > 1024) throw ArgumentError("gauss_legendre: n must lie in [1, 1024]");
    if (!(lower < upper)) throw ArgumentError("gauss_legendre: lower must be < upper");
    QuadratureRule rule;
    if (n == 1) {
        rule = {Matrix::Zero(1, 1), Vector::Constant(1, 2.0), RuleKind::GaussLegendre, -1};
    } else {
        Vector off(n - 1);
        for (int k = 1; k < n; ++k) off(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
        rule = detail::golub_welsch(off, 2.0, RuleKind::GaussLegendre);
    }
    const double half = 0.5 * (upper - lower), mid = 0.5 * (upper + lower);
    rule.nodes.array() = mid + half * rule.nodes.array();
    rule.weights *= half;
    return rule;
}

/// n-point Clenshaw-Curtis rule (Chebyshev extrema) on [lower, upper], nodes ascending.
inline QuadratureRule clenshaw_curtis(int n, double lower = 0.0, double upper = 1.0) {
    if (n < 1) throw ArgumentError("clenshaw_curtis: n must be positive");
    if (!(lower < upper)) throw ArgumentError("clenshaw_curtis: lower must be < upper");
    QuadratureRule rule;
    rule.kind = RuleKind::ClenshawCurtis;
    rule.nodes.resize(1, n);
    rule.weights.resize(n);
    const double half = 0.5 * (upper - lower), mid = 0.5 * (upper + lower);
    if (n == 1) {
        rule.nodes(0, 0) = mid;
        rule.weights(0) = upper - lower;
        return rule;
    }
    const int N = n - 1;
    for (int j = 0; j <= N; ++j) {
        // descending cos -> ascending after sign flip
        const double x = -std::cos(std::numbers::pi * j / N);
        double s = 0.0;
        for (int k = 1; k <= N / 2; ++k) {
            const double b = (2 * k == N) ? 1.0 : 2.0;
            s += b / (4.0 * k * k - 1.0) * std::cos(2.0 * std::numbers::pi * j * k / N);
        }
        const double c = (j == 0 || j == N) ? 1.0 : 2.0;
        rule.weights(j) = c / N * (1.0 - s) * half;
        rule.nodes(0, j) = mid + half * x;
    }
    for (int i = 0; i < n / 2; ++i) {
        const int j = n - 1 - i;
        const double off = 0.5 * (rule.nodes(0, j) - rule.nodes(0, i));
        rule.nodes(0, i) = mid - off;
        rule.nodes(0, j) = mid + off;
    }
    if (n % 2 == 1) rule.nodes(0, n / 2) = mid;
    return rule;
}

/// Tensor product of 1D or multi-D rules; first factor varies slowest.
inline QuadratureRule tensor_product(const std::vector<QuadratureRule>& factors) {
    if (factors.empty()) throw ArgumentError("tensor_product: no factors");
    QuadratureRule out = factors.front();
    for (std::size_t f = 1; f < factors.size(); ++f) {
        const auto& r = factors[f];
        QuadratureRule next;
        next.nodes.resize(out.dim() + r.dim(), out.size() * r.size());
        next.weights.resize(out.size() * r.size());
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < out.size(); ++i)
            for (Eigen::Index j = 0; j < r.size(); ++j, ++k) {
                next.nodes.col(k) << out.nodes.col(i), r.nodes.col(j);
                next.weights(k) = out.weights(i) * r.weights(j);
            }
        out = std::move(next);
    }
    out.kind = factors.size() == 1 ? factors.front().kind : RuleKind::TensorProduct;
    return out;
}

/// 1D rule family used as the building block of Smolyak grids.
struct RuleFamily {
    enum class Kind { GaussHermite, ClenshawCurtis } kind = Kind::GaussHermite;
    double lower = 0.0;  ///< Clenshaw-Curtis interval
    double upper = 1.0;

    static RuleFamily gauss_hermite() { return {Kind::GaussHermite, 0.0, 1.0}; }
    static RuleFamily clenshaw_curtis(double lo = 0.0, double hi = 1.0) { return {Kind::ClenshawCurtis, lo, hi}; }

    /// Points of the level-l rule: GH 2l+1 (exact to degree 4l+1); CC 1, 3, 5, 9, ... (2^l + 1, nested).
    int points(int level) const {
        if (kind == Kind::GaussHermite) return 2 * level + 1;
        return level == 0 ? 1 : (1 << level) + 1;
    }

    QuadratureRule rule(int level) const {
        auto r = kind == Kind::GaussHermite ? wassoed::gauss_hermite(points(level))
                                            : wassoed::clenshaw_curtis(points(level), lower, upper);
        r.level = level;
        return r;
    }
};

/// Smolyak combination-technique rule. Terms with zero combination coefficient
/// are skipped; coinciding nodes (1e-12 on coordinates) are merged.
inline QuadratureRule smolyak(int dim, int level, const RuleFamily& family) {
    if (dim < 1 || dim > 8) throw ArgumentError("smolyak: dim must lie in [1, 8]");
    if (level < 0 || level > 8) throw ArgumentError("smolyak: level must lie in [0, 8]");

    std::vector<QuadratureRule> rules1d;
    for (int l = 0; l <= level; ++l) rules1d.push_back(family.rule(l));

    auto binom = [](int n, int k) {
        double r = 1.0;
        for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
        return r;
    };

    using Key = std::vector<std::int64_t>;
    std::map<Key, std::pair<Vector, double>> acc;
    std::vector<int> idx(dim, 0);
    auto visit = [&](auto&& self, int d, int used) -> void {
        if (d == dim) {
            const int q = level - used;  // level - |l|
            if (q < 0 || q > dim - 1) return;
            const double coef = ((q % 2) ? -1.0 : 1.0) * binom(dim - 1, q);
            std::vector<QuadratureRule> factors;
            for (int k = 0; k < dim; ++k) factors.push_back(rules1d[idx[k]]);
            const auto t = tensor_product(factors);
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                Key key(dim);
                for (int k = 0; k < dim; ++k) key[k] = std::llround(t.nodes(k, i) * 1e12);
                auto [it, fresh] = acc.try_emplace(key, t.nodes.col(i), 0.0);
                it->second.second += coef * t.weights(i);
            }
            return;
        }
        for (int l = 0; used + l <= level; ++l) {
            idx[d] = l;
            self(self, d + 1, used + l);
        }
    };
    visit(visit, 0, 0);

    double wmax = 0.0;
    for (const auto& [k, v] : acc) wmax = std::max(wmax, std::abs(v.second));
    std::vector<std::pair<Vector, double>> kept;
    for (const auto& [k, v] : acc)
        if (std::abs(v.second) > 1e-14 * wmax) kept.push_back(v);

    QuadratureRule out;
    out.kind = dim == 1 ? rules1d.back().kind : RuleKind::SmolyakCombination;
    out.level = level;
    out.nodes.resize(dim, static_cast<Eigen::Index>(kept.size()));
    out.weights.resize(static_cast<Eigen::Index>(kept.size()));
    for (std::size_t i = 0; i < kept.size(); ++i) {
        out.nodes.col(static_cast<Eigen::Index>(i)) = kept[i].first;
        out.weights(static_cast<Eigen::Index>(i)) = kept[i].second;
    }
    return out;
}

/// Smolyak level in [0, 8] whose node count is closest to `target` (ties -> lower level).
inline int smolyak_level_for_count(int dim, const RuleFamily& family, int target) {
    int best = 0;
    long best_gap = -1;
    for (int l = 0; l <= 8; ++l) {
        const auto n = smolyak(dim, l, family).size();
        const long gap = std::labs(static_cast<long>(n) - target);
        if (best_gap < 0 || gap < best_gap) {
            best = l;
            best_gap = gap;
        }
        if (static_cast<long>(n) > target) break;
    }
    return best;
}

/// Affine push of a standard Gauss-Hermite rule to N(mean, L L^T): node -> mean + L node.
inline QuadratureRule gaussian_rule(const QuadratureRule& std_rule, const Vector& mean, const Matrix& chol) {
    QuadratureRule out = std_rule;
    out.nodes = (chol * std_rule.nodes).colwise() + mean;
    return out;
}

/// Sum of w_i f(x_i). Throws NumericError naming the node if f is not finite there.
template <class F>
double integrate(const QuadratureRule& rule, F&& f) {
    double s = 0.0;
    Vector x(rule.dim());
    for (Eigen::Index i = 0; i < rule.size(); ++i) {
        x = rule.nodes.col(i);
        const double v = f(x);
        if (!std::isfinite(v))
            throw NumericError("integrate: integrand is not finite at node " + std::to_string(i));
        s += rule.weights(i) * v;
    }
    return s;
}

/// CSV export: header `w,x1,...,xd`.
inline void write_rule_csv(std::ostream& os, const QuadratureRule& rule) {
    os << "w";
    for (Eigen::Index k = 0; k < rule.dim(); ++k) os << ",x" << (k + 1);
    os << "\n";
    os.precision(17);
    for (Eigen::Index i = 0; i < rule.size(); ++i) {
        os << rule.weights(i);
        for (Eigen::Index k = 0; k < rule.dim(); ++k) os << "," << rule.nodes(k, i);
        os << "\n";
    }
}

}  // namespace wassoed
