#pragma once

// Wasserstein-p distances: 1D CDF / quantile identities, exact discrete OT in R^n,
// and the closed form W2 between Gaussians.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"
#include "wassoed/measures.hpp"
#include "wassoed/ot_solvers.hpp"
#include "wassoed/quadrature.hpp"
#include "wassoed/special.hpp"

namespace wassoed {

/// Largest total atom count accepted by the exact multi-dimensional solvers.
inline constexpr Eigen::Index kMaxDiscreteAtoms = 4096;

// ---------------------------------------------------------------- 1D helpers

namespace detail {

inline bool is_continuous(const Measure& m) { return !std::holds_alternative<EmpiricalMeasure>(m); }

// A(x) = E[(x - X)^+] = int_{-inf}^x F(t) dt for an atomless 1D measure.
inline double lower_partial(const Measure& m, double x) {
    if (const auto* g = std::get_if<GaussianMeasure>(&m)) {
        const double s = g->stddev(), d = x - g->mean()(0);
        if (s == 0.0) return std::max(d, 0.0);
        const double z = d / s;
        return d * special::normal_cdf(z) + s * special::normal_pdf(z);
    }
    const auto& u = std::get<UniformBoxMeasure>(m);
    const double a = u.lower()(0), b = u.upper()(0);
    if (x <= a) return 0.0;
    if (x >= b) return x - 0.5 * (a + b);
    return (x - a) * (x - a) / (2.0 * (b - a));
}

// B(x) = E[(X - x)^+] = int_x^inf (1 - F(t)) dt.
inline double upper_partial(const Measure& m, double x) {
    if (const auto* g = std::get_if<GaussianMeasure>(&m)) {
        const double s = g->stddev(), d = x - g->mean()(0);
        if (s == 0.0) return std::max(-d, 0.0);
        const double z = d / s;
        return s * special::normal_pdf(z) - d * special::normal_cdf(-z);
    }
    const auto& u = std::get<UniformBoxMeasure>(m);
    const double a = u.lower()(0), b = u.upper()(0);
    if (x >= b) return 0.0;
    if (x <= a) return 0.5 * (a + b) - x;
    return (b - x) * (b - x) / (2.0 * (b - a));
}

// Support bracket holding all but ~`tail` mass on each side.
inline std::pair<double, double> support_bracket(const Measure& m, double tail) {
    if (const auto* u = std::get_if<UniformBoxMeasure>(&m)) return {u->lower()(0), u->upper()(0)};
    return {quantile_1d(m, tail), quantile_1d(m, 1.0 - tail)};
}

// Zeros of a continuous function on [a, b]: scan `samples` points, refine sign changes by bisection.
template <class F>
std::vector<double> sign_changes(F&& f, double a, double b, int samples) {
    std::vector<double> roots;
    double x0 = a, f0 = f(a);
    for (int k = 1; k <= samples; ++k) {
        const double x1 = a + (b - a) * k / samples;
        const double f1 = f(x1);
        if ((f0 < 0.0 && f1 > 0.0) || (f0 > 0.0 && f1 < 0.0)) {
            double lo = x0, hi = x1, flo = f0;
            for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(lo)); ++it) {
                const double mid = 0.5 * (lo + hi);
                const double fm = f(mid);
                if ((fm < 0.0) == (flo < 0.0)) {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            roots.push_back(0.5 * (lo + hi));
        }
        x0 = x1;
        f0 = f1;
    }
    return roots;
}

}  // namespace detail

/// Exact W1 between two 1D empirical measures: int |F1 - F2| over the merged sorted support.
inline double w1_1d_empirical(const SortedAtoms1D& s1, const SortedAtoms1D& s2) {
    std::size_t i = 0, j = 0;
    double f1 = 0.0, f2 = 0.0, total = 0.0;
    double prev = std::min(s1.x.front(), s2.x.front());
    while (i < s1.x.size() || j < s2.x.size()) {
        const double next = (j >= s2.x.size() || (i < s1.x.size() && s1.x[i] <= s2.x[j])) ? s1.x[i] : s2.x[j];
        total += std::abs(f1 - f2) * (next - prev);
        while (i < s1.x.size() && s1.x[i] == next) f1 += s1.w[i++];
        while (j < s2.x.size() && s2.x[j] == next) f2 += s2.w[j++];
        prev = next;
    }
    return total;
}

/// W1 between an atomless 1D measure and an empirical one via the CDF identity on the
/// breakpoints of the empirical CDF, with analytic integrals of the continuous CDF.
inline double w1_1d_continuous_empirical(const Measure& cont, const SortedAtoms1D& emp) {
    double total = detail::lower_partial(cont, emp.x.front());  // left tail, empirical CDF = 0
    double c = 0.0;
    for (std::size_t k = 0; k < emp.x.size(); ++k) {
        c = std::min(1.0, emp.cum[k]);
        if (k + 1 == emp.x.size()) break;
        const double a = emp.x[k], b = emp.x[k + 1];
        if (b <= a) continue;
        // int_a^b |F(x) - c| dx with F - c changing sign at most once (F monotone)
        auto signed_int = [&](double lo, double hi) {
            return detail::lower_partial(cont, hi) - detail::lower_partial(cont, lo) - c * (hi - lo);
        };
        const double fa = cdf_1d(cont, a), fb = cdf_1d(cont, b);
        if (fa >= c || fb <= c) {
            total += std::abs(signed_int(a, b));
        } else {
            const double xs = std::clamp(quantile_1d(cont, c), a, b);
            total += std::abs(signed_int(a, xs)) + std::abs(signed_int(xs, b));
        }
    }
    total += detail::upper_partial(cont, emp.x.back());  // right tail, empirical CDF = 1
    return total;
}

/// W_p^p between two atomless 1D measures via int_0^1 |Q1(u) - Q2(u)|^p du, u clipped
/// to [1e-9, 1 - 1e-9]. The integral is taken in z = Phi^{-1}(u), which removes the
/// endpoint singularity of Gaussian quantiles, on Clenshaw-Curtis grids of
/// `resolution` nodes split at crossings of the two quantile functions.
inline double wpp_1d_quantile(const Measure& mu1, const Measure& mu2, double p, int resolution) {
    if (dim(mu1) != 1 || dim(mu2) != 1) throw ArgumentError("wpp_1d_quantile: measures must be 1D");
    if (!detail::is_continuous(mu1) || !detail::is_continuous(mu2))
        throw ArgumentError("wpp_1d_quantile: measures must be atomless");
    if (resolution < 2) throw ArgumentError("wpp_1d_quantile: resolution must be >= 2");
    constexpr double eps = 1e-9;
    const double zmax = -special::normal_quantile(eps);
    auto diff = [&](double z) {
        const double u = special::normal_cdf(z);
        return quantile_1d(mu1, u) - quantile_1d(mu2, u);
    };
    std::vector<double> cuts{-zmax};
    for (double r : detail::sign_changes(diff, -zmax, zmax, resolution)) cuts.push_back(r);
    cuts.push_back(zmax);
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
        if (cuts[k + 1] <= cuts[k]) continue;
        const auto rule = clenshaw_curtis(resolution, cuts[k], cuts[k + 1]);
        for (Eigen::Index i = 0; i < rule.size(); ++i) {
            const double z = rule.nodes(0, i);
            total += rule.weights(i) * special::normal_pdf(z) * std::pow(std::abs(diff(z)), p);
        }
    }
    return total;
}

/// W1 between two atomless 1D measures by the quantile identity.
inline double w1_1d_quantile(const Measure& mu1, const Measure& mu2, int resolution) {
    return wpp_1d_quantile(mu1, mu2, 1.0, resolution);
}

/// W1 between two atomless 1D measures by the CDF identity: int |F1 - F2| dx with
/// composite Gauss-Legendre panels between crossings; tails use partial expectations.
inline double w1_1d_cdf(const Measure& mu1, const Measure& mu2, int resolution) {
    if (dim(mu1) != 1 || dim(mu2) != 1) throw ArgumentError("w1_1d_cdf: measures must be 1D");
    if (!detail::is_continuous(mu1) || !detail::is_continuous(mu2))
        throw ArgumentError("w1_1d_cdf: measures must be atomless");
    if (resolution < 2) throw ArgumentError("w1_1d_cdf: resolution must be >= 2");
    constexpr double tail = 1e-13;
    const auto [a1, b1] = detail::support_bracket(mu1, tail);
    const auto [a2, b2] = detail::support_bracket(mu2, tail);
    const double lo = std::min(a1, a2), hi = std::max(b1, b2);
    auto diff = [&](double x) { return cdf_1d(mu1, x) - cdf_1d(mu2, x); };
    std::vector<double> cuts{lo};
    for (double r : detail::sign_changes(diff, lo, hi, resolution)) cuts.push_back(r);
    cuts.push_back(hi);
    double total = std::abs(detail::lower_partial(mu1, lo) - detail::lower_partial(mu2, lo)) +
                   std::abs(detail::upper_partial(mu1, hi) - detail::upper_partial(mu2, hi));
    const int panels = std::max(1, resolution / 16);
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
        const double w = cuts[k + 1] - cuts[k];
        if (w <= 0.0) continue;
        const int np = std::max(1, static_cast<int>(std::ceil(panels * w / (hi - lo))));
        total += std::abs(detail::composite_gl(diff, cuts[k], cuts[k + 1], np));
    }
    return total;
}

/// W1 between two 1D measures. Empirical pairs are exact (merged sorted support);
/// continuous/empirical pairs use the CDF identity with analytic segments;
/// continuous pairs use the quantile identity with `resolution` nodes.
inline double w1_1d(const Measure& mu1, const Measure& mu2, int resolution = 513) {
    if (dim(mu1) != 1 || dim(mu2) != 1) throw ArgumentError("w1_1d: both measures must be one-dimensional");
    if (resolution < 1) throw ArgumentError("w1_1d: resolution must be positive");
    const auto* e1 = std::get_if<EmpiricalMeasure>(&mu1);
    const auto* e2 = std::get_if<EmpiricalMeasure>(&mu2);
    if (e1 && e2) return w1_1d_empirical(SortedAtoms1D(*e1), SortedAtoms1D(*e2));
    if (e1) return w1_1d_continuous_empirical(mu2, SortedAtoms1D(*e1));
    if (e2) return w1_1d_continuous_empirical(mu1, SortedAtoms1D(*e2));
    return w1_1d_quantile(mu1, mu2, std::max(resolution, 2));
}

// ---------------------------------------------------------------- discrete OT

struct DiscreteTransport {
    double distance = 0.0;  ///< W_p
    double cost = 0.0;      ///< W_p^p
    CouplingPlan plan;
};

inline Matrix pairwise_cost(const Matrix& x, const Matrix& y, double p) {
    Matrix c(x.cols(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j)
        for (Eigen::Index i = 0; i < x.cols(); ++i) {
            const double d2 = (x.col(i) - y.col(j)).squaredNorm();
            c(i, j) = p == 2.0 ? d2 : std::pow(d2, 0.5 * p);
        }
    return c;
}

namespace detail {

// Monotone (north-west on sorted atoms) coupling, optimal in 1D for any convex cost |x-y|^p.
inline DiscreteTransport monotone_1d(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2, double p) {
    auto order = [](const EmpiricalMeasure& e) {
        std::vector<Eigen::Index> o(static_cast<std::size_t>(e.size()));
        std::iota(o.begin(), o.end(), Eigen::Index{0});
        std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return e.atoms()(0, a) < e.atoms()(0, b); });
        return o;
    };
    const auto o1 = order(mu1), o2 = order(mu2);
    DiscreteTransport out;
    out.plan.rows = mu1.size();
    out.plan.cols = mu2.size();
    std::size_t i = 0, j = 0;
    double r1 = mu1.weights()(o1[0]), r2 = mu2.weights()(o2[0]);
    while (i < o1.size() && j < o2.size()) {
        const double f = std::min(r1, r2);
        if (f > 0.0) {
            out.plan.entries.push_back({o1[i], o2[j], f});
            out.cost += f * std::pow(std::abs(mu1.atoms()(0, o1[i]) - mu2.atoms()(0, o2[j])), p);
        }
        r1 -= f;
        r2 -= f;
        const bool last1 = i + 1 == o1.size(), last2 = j + 1 == o2.size();
        if (last1 && last2) break;
        if (last2 || (!last1 && r1 <= r2)) {
            ++i;
            r1 += mu1.weights()(o1[i]);
        } else {
            ++j;
            r2 += mu2.weights()(o2[j]);
        }
    }
    return out;
}

inline bool equal_uniform_weights(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    if (a.size() != b.size()) return false;
    const double w = 1.0 / static_cast<double>(a.size());
    return ((a.weights().array() - w).abs() <= 1e-15).all() && ((b.weights().array() - w).abs() <= 1e-15).all();
}

}  // namespace detail

/// Exact W_p between empirical measures with an optimal plan. 1D inputs use the
/// monotone coupling; equal-count equal-weight inputs use assignment; everything
/// else the transportation simplex. Multi-dimensional problems are limited to
/// kMaxDiscreteAtoms total atoms.
inline DiscreteTransport wp_discrete(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2, double p) {
    if (!(p >= 1.0) || !std::isfinite(p)) throw ArgumentError("wp_discrete: p must be a finite real >= 1");
    if (mu1.dim() != mu2.dim()) throw ArgumentError("wp_discrete: atom dimension mismatch");
    DiscreteTransport out;
    if (mu1.dim() == 1) {
        out = detail::monotone_1d(mu1, mu2, p);
    } else {
        if (mu1.size() + mu2.size() > kMaxDiscreteAtoms)
            throw CapacityError("wp_discrete: more than " + std::to_string(kMaxDiscreteAtoms) +
                                " atoms in total; subsample the inputs");
        const Matrix cost = pairwise_cost(mu1.atoms(), mu2.atoms(), p);
        if (detail::equal_uniform_weights(mu1, mu2)) {
            const auto match = ot::assignment(cost);
            const double w = 1.0 / static_cast<double>(mu1.size());
            out.plan.rows = out.plan.cols = mu1.size();
            for (Eigen::Index i = 0; i < mu1.size(); ++i) {
                const auto j = match[static_cast<std::size_t>(i)];
                out.plan.entries.push_back({i, j, w});
                out.cost += w * cost(i, j);
            }
        } else {
            auto sol = ot::transport_simplex(cost, mu1.weights(), mu2.weights());
            out.cost = sol.cost;
            out.plan = std::move(sol.plan);
        }
    }
    out.cost = std::max(out.cost, 0.0);
    out.distance = std::pow(out.cost, 1.0 / p);
    return out;
}

// ---------------------------------------------------------------- Gaussian closed form

/// ||m1 - m2||^2 + Tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}).
inline double w2_squared_gaussian(const GaussianMeasure& mu1, const GaussianMeasure& mu2) {
    if (mu1.dim() != mu2.dim()) throw ArgumentError("w2_gaussian: dimension mismatch");
    const Matrix s1 = linalg::sqrtm_psd(mu1.cov());
    const double cross = linalg::trace_sqrtm_psd(linalg::symmetrize(s1 * mu2.cov() * s1));
    const double v = (mu1.mean() - mu2.mean()).squaredNorm() + mu1.cov().trace() + mu2.cov().trace() - 2.0 * cross;
    return std::max(v, 0.0);
}

inline double w2_gaussian(const GaussianMeasure& mu1, const GaussianMeasure& mu2) {
    return std::sqrt(w2_squared_gaussian(mu1, mu2));
}

// ---------------------------------------------------------------- bound check

/// W_p^p for any supported pair: Gaussian/Gaussian at p = 2, empirical/empirical,
/// or two 1D measures.
inline double wpp(const Measure& mu1, const Measure& mu2, double p, int resolution = 513) {
    const auto* g1 = std::get_if<GaussianMeasure>(&mu1);
    const auto* g2 = std::get_if<GaussianMeasure>(&mu2);
    if (g1 && g2 && p == 2.0) return w2_squared_gaussian(*g1, *g2);
    const auto* e1 = std::get_if<EmpiricalMeasure>(&mu1);
    const auto* e2 = std::get_if<EmpiricalMeasure>(&mu2);
    if (e1 && e2) return wp_discrete(*e1, *e2, p).cost;
    if (dim(mu1) == 1 && dim(mu2) == 1) {
        if (p == 1.0) return w1_1d(mu1, mu2, resolution);
        if (!e1 && !e2) return wpp_1d_quantile(mu1, mu2, p, resolution);
    }
    throw UnsupportedDimensionError("wpp: unsupported measure pair for this p");
}

/// True iff W_p^p(mu1, mu2) <= 2^{p-1} (M_p(mu1) + M_p(mu2)) + 1e-9.
inline bool moment_bound_check(const Measure& mu1, const Measure& mu2, double p) {
    const double lhs = wpp(mu1, mu2, p);
    const double rhs = std::pow(2.0, p - 1.0) * (moment_p(mu1, p) + moment_p(mu2, p));
    return lhs <= rhs + 1e-9;
}

}  // namespace wassoed
