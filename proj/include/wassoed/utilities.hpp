#pragma once

// Expected-utility evaluators: Gaussian closed forms, nested quadrature estimators
// and empirical-prior estimators for U_1 / U_2, plus the EIG baseline.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "wassoed/bayes.hpp"
#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"
#include "wassoed/measures.hpp"
#include "wassoed/quadrature.hpp"
#include "wassoed/random.hpp"
#include "wassoed/transport.hpp"
#include "wassoed/wasserstein.hpp"

namespace wassoed {

enum class EstimatorKind { ClosedFormGaussian, NestedQuadrature, NestedMonteCarlo, EmpiricalPrior };
enum class InnerMethod { GaussianClosedForm, TransportMap, DiscreteOT };
enum class EigMethod { GaussianClosedForm, NestedQuadrature };

inline const char* to_string(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::ClosedFormGaussian: return "closed_form_gaussian";
        case EstimatorKind::NestedQuadrature: return "nested_quadrature";
        case EstimatorKind::NestedMonteCarlo: return "nested_monte_carlo";
        case EstimatorKind::EmpiricalPrior: return "empirical_prior";
    }
    return "?";
}

struct UtilityEstimate {
    double value = 0.0;
    EstimatorKind estimator = EstimatorKind::ClosedFormGaussian;
    std::optional<double> std_error;  ///< only for Monte Carlo estimators
    long outer_count = 1;             ///< outer nodes or samples
    long inner_count = 1;             ///< inner nodes, cells or atoms
    Vector theta;
    bool diverged = false;            ///< EIG only: value is +inf
};

// ---------------------------------------------------------------- Gaussian closed forms

namespace detail {
inline UtilityEstimate closed(double v) {
    UtilityEstimate u;
    u.value = v;
    u.estimator = EstimatorKind::ClosedFormGaussian;
    return u;
}
inline void require_invertible(const Matrix& b, const char* what) {
    if (b.rows() != b.cols()) throw ArgumentError(std::string(what) + ": B must be square");
    Eigen::FullPivLU<Matrix> lu(b);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) throw ArgumentError(std::string(what) + ": B must be invertible");
}
}  // namespace detail

/// 2 Tr C0 - 2 Tr (C0^{1/2} C_post C0^{1/2})^{1/2}
inline UtilityEstimate u2_gaussian_closed_form(const LinearGaussianModel& model) {
    const Matrix& c0 = model.prior().cov();
    const Matrix cp = posterior_covariance(model);
    const Matrix s0 = linalg::sqrtm_psd(c0);
    const double v = 2.0 * c0.trace() - 2.0 * linalg::trace_sqrtm_psd(linalg::symmetrize(s0 * cp * s0));
    return detail::closed(std::max(v, 0.0));
}

/// Same value through C_post w = lambda C0^{-1} w.
inline UtilityEstimate u2_gaussian_via_generalized_eigen(const LinearGaussianModel& model) {
    const Matrix& c0 = model.prior().cov();
    const auto n = c0.rows();
    Eigen::LLT<Matrix> llt(c0);
    if (llt.info() != Eigen::Success || llt.matrixLLT().diagonal().minCoeff() <= 0.0)
        throw ArgumentError("u2_gaussian_via_generalized_eigen: prior covariance must be invertible");
    const Matrix c0inv = linalg::symmetrize(llt.solve(Matrix::Identity(n, n)));
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(posterior_covariance(model), c0inv);
    if (ges.info() != Eigen::Success) throw NumericError("u2_gaussian_via_generalized_eigen: eigensolver failed");
    const double s = ges.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return detail::closed(std::max(2.0 * c0.trace() - 2.0 * s, 0.0));
}

/// -Tr(B C_post B^T)
inline double weighted_a_optimality(const LinearGaussianModel& model, const Matrix& b) {
    detail::require_invertible(b, "weighted_a_optimality");
    if (b.cols() != model.input_dim()) throw ArgumentError("weighted_a_optimality: B has wrong size");
    return -(b * posterior_covariance(model) * b.transpose()).trace();
}

/// U_2 for the cost |B(x - x')|^2.
inline double weighted_u2(const LinearGaussianModel& model, const Matrix& b) {
    detail::require_invertible(b, "weighted_u2");
    if (b.cols() != model.input_dim()) throw ArgumentError("weighted_u2: B has wrong size");
    const Matrix bc0 = linalg::symmetrize(b * model.prior().cov() * b.transpose());
    const Matrix bcp = linalg::symmetrize(b * posterior_covariance(model) * b.transpose());
    const Matrix s = linalg::sqrtm_psd(bc0);
    return std::max(2.0 * bc0.trace() - 2.0 * linalg::trace_sqrtm_psd(linalg::symmetrize(s * bcp * s)), 0.0);
}

/// 1/2 (log det C0 - log det C_post); +inf with `diverged` when C_post is singular.
inline UtilityEstimate eig_gaussian(const LinearGaussianModel& model) {
    const Matrix cp = posterior_covariance(model);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cp);
    const double scale = std::max(model.prior().cov().diagonal().maxCoeff(), 1e-300);
    if (es.eigenvalues().minCoeff() <= 1e-14 * scale) {
        auto u = detail::closed(std::numeric_limits<double>::infinity());
        u.diverged = true;
        return u;
    }
    return detail::closed(0.5 * (linalg::logdet_spd(model.prior().cov()) - es.eigenvalues().array().log().sum()));
}

// ---------------------------------------------------------------- rules

/// Standard normal rule in d dimensions: Gauss-Hermite with `count` nodes in 1D,
/// the Smolyak GH rule whose size is closest to `count` otherwise.
inline QuadratureRule standard_normal_rule(Eigen::Index d, int count) {
    if (d == 1) return gauss_hermite(count);
    const auto fam = RuleFamily::gauss_hermite();
    return smolyak(static_cast<int>(d), smolyak_level_for_count(static_cast<int>(d), fam, count), fam);
}

/// Probability rule for the prior (weights sum to 1, nodes in x space). Gaussian:
/// tensor GH through the Cholesky factor; box: tensor Clenshaw-Curtis; empirical: its atoms.
inline QuadratureRule prior_rule(const Measure& prior, int per_dim) {
    if (const auto* e = std::get_if<EmpiricalMeasure>(&prior)) {
        QuadratureRule r;
        r.nodes = e->atoms();
        r.weights = e->weights();
        return r;
    }
    const auto n = dim(prior);
    if (n > 3) throw UnsupportedDimensionError("prior_rule: tensor rules limited to dimension 3; pass a Smolyak rule");
    if (const auto* g = std::get_if<GaussianMeasure>(&prior)) {
        const auto gh = gauss_hermite(per_dim);
        return gaussian_rule(tensor_product(std::vector<QuadratureRule>(static_cast<std::size_t>(n), gh)), g->mean(),
                             linalg::cholesky_with_jitter(g->cov()));
    }
    const auto& u = std::get<UniformBoxMeasure>(prior);
    std::vector<QuadratureRule> f;
    for (Eigen::Index k = 0; k < n; ++k) f.push_back(clenshaw_curtis(per_dim, u.lower()(k), u.upper()(k)));
    auto r = tensor_product(f);
    r.weights /= u.volume();
    return r;
}

struct NestedOptions {
    std::optional<QuadratureRule> prior_nodes;  ///< probability rule in x space; default prior_rule(prior, 33)
    std::optional<QuadratureRule> noise_nodes;  ///< standard normal rule in y dims; default GH 33 / Smolyak ~143
    int inner_resolution = 513;                 ///< w1_1d resolution for Gaussian inner problems
    int posterior_cells = 2048;                 ///< 1D cell discretization of non-Gaussian posteriors
    int atoms_per_dim = 16;                     ///< nD grid atoms for discrete OT
    int eig_atoms_per_dim = 48;                 ///< nD grid atoms for the KL inner problem
    int gh_transport_nodes = 33;                ///< rule for 1D transport_cost
    MongeAmpereOptions monge_ampere;
};

namespace detail {

inline QuadratureRule noise_rule_or_default(const NestedOptions& opt, Eigen::Index d) {
    if (opt.noise_nodes) {
        if (opt.noise_nodes->dim() != d) throw ArgumentError("nested estimator: noise rule has wrong dimension");
        return *opt.noise_nodes;
    }
    return standard_normal_rule(d, d == 1 ? 33 : 143);
}

inline QuadratureRule prior_rule_or_default(const NestedOptions& opt, const Measure& prior) {
    if (opt.prior_nodes) {
        if (opt.prior_nodes->dim() != dim(prior)) throw ArgumentError("nested estimator: prior rule has wrong dimension");
        return *opt.prior_nodes;
    }
    return prior_rule(prior, 33);
}

/// sum_k w_k sum_j v_j f(G(x_k) + L z_j): the evidence as a mixture over prior nodes.
template <class F>
double joint_outer(const QuadratureRule& xr, const GaussianNoiseModel& model, const Vector& theta,
                   const QuadratureRule& zr, F&& f) {
    const Matrix& l = model.noise_chol();
    double total = 0.0;
    Vector y(model.output_dim());
    for (Eigen::Index k = 0; k < xr.size(); ++k) {
        if (xr.weights(k) == 0.0) continue;
        const Vector gx = model.forward()(xr.nodes.col(k), theta);
        double s = 0.0;
        for (Eigen::Index j = 0; j < zr.size(); ++j) {
            y = gx + l * zr.nodes.col(j);
            s += zr.weights(j) * f(y);
        }
        total += xr.weights(k) * s;
    }
    if (!std::isfinite(total)) throw NumericError("nested estimator: non-finite outer sum");
    return total;
}

/// Linear-Gaussian pieces shared by the conjugate routes.
struct Conjugate {
    GaussianMeasure prior;
    Matrix gain;      // m_post(y) = m0 + gain (y - A m0)
    Vector ev_mean;   // A m0
    Matrix ev_chol;   // chol(Gamma + A C0 A^T)
    Matrix cov_post;
};

inline std::optional<Conjugate> conjugate(const Measure& prior, const GaussianNoiseModel& model, const Vector& theta) {
    const auto* g = std::get_if<GaussianMeasure>(&prior);
    if (!g || !model.forward().is_linear()) return std::nullopt;
    const Matrix a = model.forward().linear_operator(theta);
    const LinearGaussianModel lg(a, model.noise_cov(), *g);
    const Matrix gc0 = a * g->cov();
    const Matrix s = linalg::symmetrize(model.noise_cov() + gc0 * a.transpose());
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success) throw NumericError("nested estimator: evidence covariance not positive definite");
    const GaussianMeasure post0 = conjugate_posterior(lg, a * g->mean());
    return Conjugate{*g, llt.solve(gc0).transpose(), a * g->mean(), llt.matrixL(), post0.cov()};
}

/// Non-Gaussian 1D posterior as a piecewise-constant density on equal cells.
struct Histogram1D {
    double lo = 0.0, h = 1.0;
    Vector mass;  // sums to 1
    Eigen::Index cells() const { return mass.size(); }
    double mid(Eigen::Index i) const { return lo + (static_cast<double>(i) + 0.5) * h; }
};

inline Histogram1D discretize_1d(const Measure& prior, int cells) {
    if (cells < 2) throw ArgumentError("posterior_cells must be at least 2");
    Histogram1D hst;
    hst.mass.resize(cells);
    if (const auto* u = std::get_if<UniformBoxMeasure>(&prior)) {
        hst.lo = u->lower()(0);
        hst.h = (u->upper()(0) - hst.lo) / cells;
        hst.mass.setConstant(1.0 / cells);
        return hst;
    }
    const auto* g = std::get_if<GaussianMeasure>(&prior);
    if (!g) throw ArgumentError("histogram inner problem needs a Gaussian or uniform prior");
    const double m = g->mean()(0), s = g->stddev();
    if (!(s > 0.0)) throw ArgumentError("histogram inner problem needs a non-degenerate prior");
    hst.lo = m - 8.5 * s;
    hst.h = 17.0 * s / cells;
    double prev = special::normal_cdf(-8.5);
    for (int i = 0; i < cells; ++i) {
        const double next = special::normal_cdf(-8.5 + 17.0 * (i + 1.0) / cells);
        hst.mass(i) = next - prev;
        prev = next;
    }
    hst.mass /= hst.mass.sum();
    return hst;
}

/// Posterior masses q_i exp(-phi_i) / Z; returns log Z relative to the prior.
inline double reweight_cells(const Vector& prior_mass, const Vector& phi, Vector& out) {
    const double pmin = phi.minCoeff();
    out = prior_mass.array() * (-(phi.array() - pmin)).exp();
    const double z = out.sum();
    if (!(z > 0.0) || !std::isfinite(z)) throw DegenerateEvidenceError("posterior weights vanished");
    out /= z;
    return std::log(z) - pmin;
}

/// W_1 between two histograms on the same cells (both CDFs piecewise linear).
inline double w1_hist(const Histogram1D& a, const Vector& b) {
    double fa = 0.0, fb = 0.0, s = 0.0;
    for (Eigen::Index i = 0; i < a.cells(); ++i) {
        const double d0 = fa - fb;
        fa += a.mass(i);
        fb += b(i);
        const double d1 = fa - fb;
        const double s0 = std::abs(d0), s1 = std::abs(d1);
        if (d0 * d1 >= 0.0) s += 0.5 * (s0 + s1);
        else s += 0.5 * (d0 * d0 + d1 * d1) / (s0 + s1);
    }
    return s * a.h;
}

/// W_p^p between two histograms on the same cells through their piecewise-linear
/// quantile functions; exact for p = 2.
inline double wpp_hist(const Histogram1D& a, const Vector& b, double p) {
    const Eigen::Index n = a.cells();
    std::size_t ia = 0, ib = 0;
    double ca = 0.0, cb = 0.0;  // cumulative mass before cell ia / ib
    auto skip_empty = [n](const Vector& m, std::size_t& i) {
        while (static_cast<Eigen::Index>(i) < n && m(static_cast<Eigen::Index>(i)) <= 0.0) ++i;
    };
    skip_empty(a.mass, ia);
    skip_empty(b, ib);
    static const QuadratureRule gl = gauss_legendre(8, 0.0, 1.0);
    double u = 0.0, total = 0.0;
    while (static_cast<Eigen::Index>(ia) < n && static_cast<Eigen::Index>(ib) < n) {
        const double ea = ca + a.mass(static_cast<Eigen::Index>(ia)), eb = cb + b(static_cast<Eigen::Index>(ib));
        const double u1 = std::min(ea, eb);
        if (u1 > u) {
            auto qa = [&](double v) {
                return a.lo + a.h * (static_cast<double>(ia) + (v - ca) / a.mass(static_cast<Eigen::Index>(ia)));
            };
            auto qb = [&](double v) {
                return a.lo + a.h * (static_cast<double>(ib) + (v - cb) / b(static_cast<Eigen::Index>(ib)));
            };
            const double d0 = qa(u) - qb(u), d1 = qa(u1) - qb(u1);
            if (p == 2.0) {
                total += (u1 - u) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
            } else {
                for (Eigen::Index k = 0; k < gl.size(); ++k) {
                    const double t = gl.nodes(0, k);
                    total += (u1 - u) * gl.weights(k) * std::pow(std::abs(d0 + (d1 - d0) * t), p);
                }
            }
            u = u1;
        }
        // advance whichever cell ended (both on ties)
        const bool adv_a = ea <= eb, adv_b = eb <= ea;
        if (adv_a) {
            ca = ea;
            ++ia;
            skip_empty(a.mass, ia);
        }
        if (adv_b) {
            cb = eb;
            ++ib;
            skip_empty(b, ib);
        }
    }
    return std::max(total, 0.0);
}

inline double kl_cells(const Vector& post, const Vector& prior) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < post.size(); ++i)
        if (post(i) > 0.0) s += post(i) * std::log(post(i) / prior(i));
    return std::max(s, 0.0);
}

/// Whitened forward outputs L^{-1} G(x_i; theta), one column per point.
inline Matrix whitened_outputs(const GaussianNoiseModel& model, const Matrix& pts, const Vector& theta) {
    Matrix out(model.output_dim(), pts.cols());
    for (Eigen::Index i = 0; i < pts.cols(); ++i) out.col(i) = model.forward()(pts.col(i), theta);
    return model.noise_chol().triangularView<Eigen::Lower>().solve(out);
}

inline void energies(const Matrix& wg, const Vector& wy, Vector& phi) {
    phi.resize(wg.cols());
    for (Eigen::Index i = 0; i < wg.cols(); ++i) phi(i) = 0.5 * (wg.col(i) - wy).squaredNorm();
}

/// Midpoint grid on the prior support with prior masses: box priors use the box,
/// Gaussians m +- 6 sigma per axis.
inline EmpiricalMeasure grid_atoms(const Measure& prior, int per_dim) {
    if (const auto* e = std::get_if<EmpiricalMeasure>(&prior)) return *e;
    const auto n = dim(prior);
    if (per_dim < 1) throw ArgumentError("atoms_per_dim must be positive");
    Vector lo(n), hi(n);
    if (const auto* u = std::get_if<UniformBoxMeasure>(&prior)) {
        lo = u->lower();
        hi = u->upper();
    } else {
        const auto& g = std::get<GaussianMeasure>(prior);
        const Vector sd = g.cov().diagonal().cwiseSqrt();
        lo = g.mean() - 6.0 * sd;
        hi = g.mean() + 6.0 * sd;
    }
    long total = 1;
    for (Eigen::Index k = 0; k < n; ++k) total *= per_dim;
    if (total > 1'000'000) throw CapacityError("grid_atoms: grid too large");
    Matrix pts(n, total);
    Vector w(total);
    for (long idx = 0; idx < total; ++idx) {
        long r = idx;
        for (Eigen::Index k = 0; k < n; ++k) {
            const long ik = r % per_dim;
            r /= per_dim;
            pts(k, idx) = lo(k) + (hi(k) - lo(k)) * (static_cast<double>(ik) + 0.5) / per_dim;
        }
    }
    if (const auto* g = std::get_if<GaussianMeasure>(&prior)) {
        for (long idx = 0; idx < total; ++idx) w(idx) = g->log_density(pts.col(idx));
        w = (w.array() - w.maxCoeff()).exp();
        w /= w.sum();
    } else {
        w.setConstant(1.0 / static_cast<double>(total));
    }
    return {std::move(pts), std::move(w)};
}

/// Drops posterior atoms below `tol` relative mass and renormalizes.
inline EmpiricalMeasure prune(const Matrix& atoms, const Vector& w, double tol = 1e-13) {
    std::vector<Eigen::Index> keep;
    const double mx = w.maxCoeff();
    for (Eigen::Index i = 0; i < w.size(); ++i)
        if (w(i) > tol * mx) keep.push_back(i);
    Matrix a(atoms.rows(), static_cast<Eigen::Index>(keep.size()));
    Vector ww(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        a.col(static_cast<Eigen::Index>(k)) = atoms.col(keep[k]);
        ww(static_cast<Eigen::Index>(k)) = w(keep[k]);
    }
    ww /= ww.sum();
    return {std::move(a), std::move(ww)};
}

inline UtilityEstimate nested(double v, long outer, long inner, const Vector& theta) {
    UtilityEstimate u;
    u.value = v;
    u.estimator = EstimatorKind::NestedQuadrature;
    u.outer_count = std::max(outer, 1L);
    u.inner_count = std::max(inner, 1L);
    u.theta = theta;
    return u;
}

}  // namespace detail

// ---------------------------------------------------------------- U_1

namespace detail {

// standard normal expectation as two half-lines, composite Gauss-Legendre on
// [0, 8.5] with panels of 0.5
inline QuadratureRule split_normal_rule(int per_panel = 8) {
    const int panels = 17;
    QuadratureRule r;
    r.nodes.resize(1, 2 * panels * per_panel);
    r.weights.resize(2 * panels * per_panel);
    Eigen::Index k = 0;
    for (int p = 0; p < panels; ++p) {
        const auto gl = gauss_legendre(per_panel, 0.5 * p, 0.5 * (p + 1));
        for (Eigen::Index i = 0; i < gl.size(); ++i)
            for (double sgn : {-1.0, 1.0}) {
                const double z = gl.nodes(0, i);
                r.nodes(0, k) = sgn * z;
                r.weights(k++) = gl.weights(i) * std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
            }
    }
    return r;
}

}  // namespace detail

/// U_1 for a 1D unknown. Gaussian prior with a linear map: outer rule on the Gaussian
/// evidence, inner W_1 of the conjugate posterior through w1_1d. Otherwise the evidence
/// is a mixture over prior nodes and the posterior a histogram on `posterior_cells` cells.
inline UtilityEstimate u1_nested(const Measure& prior, const GaussianNoiseModel& model, const Vector& theta,
                                 const NestedOptions& opt = {}) {
    if (dim(prior) != 1) throw UnsupportedDimensionError("u1_nested: the unknown must be one-dimensional");
    const auto d = model.output_dim();
    if (const auto c = detail::conjugate(prior, model, theta)) {
        // scalar data: W_1(y) ~ |y - E y| when the data is weak, so split the
        // evidence integral at its mean instead of straddling the kink
        const QuadratureRule zr = (!opt.noise_nodes && d == 1) ? detail::split_normal_rule()
                                                               : detail::noise_rule_or_default(opt, d);
        double total = 0.0;
        for (Eigen::Index j = 0; j < zr.size(); ++j) {
            const Vector y = c->ev_mean + c->ev_chol * zr.nodes.col(j);
            const GaussianMeasure post(c->prior.mean() + c->gain * (y - c->ev_mean), c->cov_post);
            total += zr.weights(j) * w1_1d(c->prior, post, opt.inner_resolution);
        }
        return detail::nested(total, zr.size(), opt.inner_resolution, theta);
    }
    if (std::holds_alternative<EmpiricalMeasure>(prior))
        throw ArgumentError("u1_nested: empirical priors go through u1_empirical");
    const QuadratureRule zr = detail::noise_rule_or_default(opt, d);
    const QuadratureRule xr = detail::prior_rule_or_default(opt, prior);
    const auto hist = detail::discretize_1d(prior, opt.posterior_cells);
    Matrix mids(1, hist.cells());
    for (Eigen::Index i = 0; i < hist.cells(); ++i) mids(0, i) = hist.mid(i);
    const Matrix wg = detail::whitened_outputs(model, mids, theta);
    const auto& l = model.noise_chol();
    Vector phi, post;
    const double v = detail::joint_outer(xr, model, theta, zr, [&](const Vector& y) {
        detail::energies(wg, l.triangularView<Eigen::Lower>().solve(y), phi);
        detail::reweight_cells(hist.mass, phi, post);
        return detail::w1_hist(hist, post);
    });
    return detail::nested(v, xr.size() * zr.size(), hist.cells(), theta);
}

/// U_1^M = (1/M) sum_m E_{y ~ N(G(x^m), Gamma)} W_1(mu_M, mu_M^y) with the exact discrete
/// inner distance; the outer expectation per atom uses `noise_rule` (standard normal).
inline UtilityEstimate u1_empirical(const EmpiricalMeasure& atoms, const GaussianNoiseModel& model,
                                    const Vector& theta, const QuadratureRule& noise_rule) {
    if (atoms.dim() != 1) throw UnsupportedDimensionError("u1_empirical: atoms must be one-dimensional");
    if (noise_rule.dim() != model.output_dim()) throw ArgumentError("u1_empirical: noise rule has wrong dimension");
    const auto m = atoms.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return atoms.atoms()(0, a) < atoms.atoms()(0, b); });
    Matrix xs(1, m);
    Vector w0(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        xs(0, i) = atoms.atoms()(0, order[static_cast<std::size_t>(i)]);
        w0(i) = atoms.weights()(order[static_cast<std::size_t>(i)]);
    }
    const Matrix wg = detail::whitened_outputs(model, xs, theta);
    Vector phi, post;
    double total = 0.0;
    for (Eigen::Index k = 0; k < m; ++k) {
        if (w0(k) == 0.0) continue;
        double s = 0.0;
        for (Eigen::Index j = 0; j < noise_rule.size(); ++j) {
            const Vector wy = wg.col(k) + noise_rule.nodes.col(j);
            detail::energies(wg, wy, phi);
            detail::reweight_cells(w0, phi, post);
            double f0 = 0.0, f1 = 0.0, w1 = 0.0;
            for (Eigen::Index i = 0; i + 1 < m; ++i) {
                f0 += w0(i);
                f1 += post(i);
                w1 += std::abs(f0 - f1) * (xs(0, i + 1) - xs(0, i));
            }
            s += noise_rule.weights(j) * w1;
        }
        total += w0(k) * s;
    }
    UtilityEstimate u;
    u.value = total;
    u.estimator = EstimatorKind::EmpiricalPrior;
    u.outer_count = m * noise_rule.size();
    u.inner_count = m;
    u.theta = theta;
    return u;
}

struct EvidenceGridOptions {
    double panel_width = 0.25;  ///< in noise standard deviations
    int nodes_per_panel = 8;
    double tail = 8.0;         ///< extent beyond the extreme atoms, in noise standard deviations
};

/// U_1^M for a scalar linear map y = a x + eps with uniform-weight atoms. Integrates the
/// mixture evidence on one composite Gauss-Legendre y-grid; per y the posterior support is
/// restricted to atoms whose relative weight does not underflow, so a sweep costs
/// O(K (window + log M)) instead of O(K M).
inline UtilityEstimate u1_empirical_evidence_grid(const EmpiricalMeasure& atoms, const GaussianNoiseModel& model,
                                                  const Vector& theta, const EvidenceGridOptions& opt = {}) {
    if (atoms.dim() != 1 || model.output_dim() != 1 || model.forward().input_dim != 1)
        throw UnsupportedDimensionError("u1_empirical_evidence_grid: scalar model and 1D atoms required");
    if (!model.forward().is_linear()) throw ArgumentError("u1_empirical_evidence_grid: the map must be linear");
    const double a = model.forward().linear_operator(theta)(0, 0);
    const double sigma = model.noise_chol()(0, 0);
    const auto m = atoms.size();
    UtilityEstimate u;
    u.estimator = EstimatorKind::EmpiricalPrior;
    u.theta = theta;
    u.inner_count = m;
    if (m == 1 || a == 0.0) return u;
    const double inv_m = 1.0 / static_cast<double>(m);
    if (((atoms.weights().array() - inv_m).abs() > 1e-12).any())
        throw ArgumentError("u1_empirical_evidence_grid: atoms must carry equal weights");
    // reflect so that s = |a| x is increasing in the atom order; W_1 is reflection invariant
    std::vector<double> x(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) x[static_cast<std::size_t>(i)] = (a > 0 ? 1.0 : -1.0) * atoms.atoms()(0, i);
    std::sort(x.begin(), x.end());
    const double g = std::abs(a);
    std::vector<double> s(x.size()), gap(x.size(), 0.0), pre(x.size() + 1, 0.0), suf(x.size() + 1, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) s[i] = g * x[i];
    for (std::size_t i = 0; i + 1 < x.size(); ++i) gap[i] = x[i + 1] - x[i];
    // pre[i] = sum_{k<i} F0_k gap_k, suf[i] = sum_{k>=i} (1 - F0_k) gap_k, F0_k = (k+1)/M
    for (std::size_t i = 0; i < x.size(); ++i) pre[i + 1] = pre[i] + (i + 1) * inv_m * gap[i];
    for (std::size_t i = x.size(); i-- > 0;) suf[i] = suf[i + 1] + (1.0 - (i + 1) * inv_m) * gap[i];

    const QuadratureRule gl = gauss_legendre(opt.nodes_per_panel, 0.0, 1.0);
    const double lo = s.front() - opt.tail * sigma, hi = s.back() + opt.tail * sigma;
    const double pw = opt.panel_width * sigma;
    const long panels = static_cast<long>(std::ceil((hi - lo) / pw));
    const double h = (hi - lo) / static_cast<double>(panels);
    const double norm = inv_m / (std::sqrt(2.0 * std::numbers::pi) * sigma);
    const double cut = 2.0 * 750.0 * sigma * sigma;
    std::vector<double> w;
    double total = 0.0, mass = 0.0;
    long nodes = 0;
    for (long p = 0; p < panels; ++p) {
        for (Eigen::Index q = 0; q < gl.size(); ++q) {
            const double y = lo + h * (static_cast<double>(p) + gl.nodes(0, q));
            const auto it = std::lower_bound(s.begin(), s.end(), y);
            double dmin = std::numeric_limits<double>::infinity();
            if (it != s.end()) dmin = *it - y;
            if (it != s.begin()) dmin = std::min(dmin, y - *(it - 1));
            const double r = std::sqrt(dmin * dmin + cut);
            const auto lo_i = static_cast<std::size_t>(std::lower_bound(s.begin(), s.end(), y - r) - s.begin());
            const auto hi_i = static_cast<std::size_t>(std::upper_bound(s.begin(), s.end(), y + r) - s.begin());
            const double phimin = 0.5 * dmin * dmin / (sigma * sigma);
            w.assign(hi_i - lo_i, 0.0);
            double z = 0.0;
            for (std::size_t i = lo_i; i < hi_i; ++i) {
                const double e = (s[i] - y) / sigma;
                w[i - lo_i] = std::exp(-(0.5 * e * e - phimin));
                z += w[i - lo_i];
            }
            const double dens = norm * std::exp(-phimin) * z;
            ++nodes;
            if (dens == 0.0) continue;
            // posterior CDF is 0 before lo_i and 1 from hi_i - 1 on
            double w1 = pre[lo_i] + suf[hi_i > 0 ? hi_i - 1 : 0];
            double c = 0.0;
            for (std::size_t i = lo_i; i + 1 < hi_i; ++i) {
                c += w[i - lo_i] / z;
                w1 += std::abs((i + 1) * inv_m - c) * gap[i];
            }
            const double wt = h * gl.weights(q) * dens;
            total += wt * w1;
            mass += wt;
        }
    }
    if (!std::isfinite(total)) throw NumericError("u1_empirical_evidence_grid: non-finite sum");
    u.value = total / mass;  // mass is 1 up to the truncated tails
    u.outer_count = nodes;
    return u;
}

// ---------------------------------------------------------------- U_2

/// U_2 = E_nu |x - S^y(x)|^2 with the inner problem solved by `inner`:
/// GaussianClosedForm needs a Gaussian prior and a linear map; TransportMap uses the
/// monotone map in 1D and a Monge-Ampere solve per observation for 2D box priors;
/// DiscreteOT transports a grid (or the given atoms) of the prior onto its reweighting.
inline UtilityEstimate u2_nested(const Measure& prior, const GaussianNoiseModel& model, const Vector& theta,
                                 InnerMethod inner, const NestedOptions& opt = {}) {
    if (dim(prior) != model.forward().input_dim) throw ArgumentError("u2_nested: prior dimension does not match the model");
    const auto d = model.output_dim();
    const QuadratureRule zr = detail::noise_rule_or_default(opt, d);
    const auto conj = detail::conjugate(prior, model, theta);
    const auto n = dim(prior);

    if (inner == InnerMethod::GaussianClosedForm) {
        if (!conj) throw ArgumentError("u2_nested: closed-form inner problem needs a Gaussian prior and linear map");
        double total = 0.0;
        for (Eigen::Index j = 0; j < zr.size(); ++j) {
            const Vector y = conj->ev_mean + conj->ev_chol * zr.nodes.col(j);
            const GaussianMeasure post(conj->prior.mean() + conj->gain * (y - conj->ev_mean), conj->cov_post);
            total += zr.weights(j) * w2_squared_gaussian(conj->prior, post);
        }
        return detail::nested(total, zr.size(), 1, theta);
    }

    if (inner == InnerMethod::TransportMap) {
        if (n == 1 && conj) {
            const auto gh = gauss_hermite(opt.gh_transport_nodes);
            double total = 0.0;
            for (Eigen::Index j = 0; j < zr.size(); ++j) {
                const Vector y = conj->ev_mean + conj->ev_chol * zr.nodes.col(j);
                const GaussianMeasure post(conj->prior.mean() + conj->gain * (y - conj->ev_mean), conj->cov_post);
                const auto map = transport_map_1d(conj->prior, post, MapDirection::PriorToPosterior);
                total += zr.weights(j) * transport_cost(map, conj->prior, gh);
            }
            return detail::nested(total, zr.size(), gh.size(), theta);
        }
        if (std::holds_alternative<EmpiricalMeasure>(prior))
            throw ArgumentError("u2_nested: transport_map needs a prior with a density");
        const QuadratureRule xr = detail::prior_rule_or_default(opt, prior);
        if (n == 1) {
            const auto hist = detail::discretize_1d(prior, opt.posterior_cells);
            Matrix mids(1, hist.cells());
            for (Eigen::Index i = 0; i < hist.cells(); ++i) mids(0, i) = hist.mid(i);
            const Matrix wg = detail::whitened_outputs(model, mids, theta);
            const auto& l = model.noise_chol();
            Vector phi, post;
            const double v = detail::joint_outer(xr, model, theta, zr, [&](const Vector& y) {
                detail::energies(wg, l.triangularView<Eigen::Lower>().solve(y), phi);
                detail::reweight_cells(hist.mass, phi, post);
                return detail::wpp_hist(hist, post, 2.0);
            });
            return detail::nested(v, xr.size() * zr.size(), hist.cells(), theta);
        }
        const auto* box = std::get_if<UniformBoxMeasure>(&prior);
        if (n != 2 || !box) throw UnsupportedDimensionError("u2_nested: Monge-Ampere inner problem needs a 2D box prior");
        const BoxDensity src = BoxDensity::uniform(box->lower(), box->upper());
        const auto gl = tensor_product({gauss_legendre(24, box->lower()(0), box->upper()(0)),
                                        gauss_legendre(24, box->lower()(1), box->upper()(1))});
        const double v = detail::joint_outer(xr, model, theta, zr, [&](const Vector& y) {
            BoxDensity tgt = src;
            tgt.log_density = [&model, &theta, y](const Vector& x) { return -likelihood_energy(model, x, y, theta); };
            tgt.grad_log_density = nullptr;
            const auto pot = solve_monge_ampere(src, tgt, opt.monge_ampere);
            return transport_cost(pot, src, gl);
        });
        return detail::nested(v, xr.size() * zr.size(), opt.monge_ampere.interior_count, theta);
    }

    // discrete OT on atoms
    const EmpiricalMeasure atoms =
        n == 1 && !std::holds_alternative<EmpiricalMeasure>(prior)
            ? [&] {
                  const auto hist = detail::discretize_1d(prior, opt.posterior_cells);
                  Matrix mids(1, hist.cells());
                  for (Eigen::Index i = 0; i < hist.cells(); ++i) mids(0, i) = hist.mid(i);
                  return EmpiricalMeasure(std::move(mids), hist.mass);
              }()
            : detail::grid_atoms(prior, opt.atoms_per_dim);
    const QuadratureRule xr = detail::prior_rule_or_default(opt, prior);
    const Matrix wg = detail::whitened_outputs(model, atoms.atoms(), theta);
    const auto& l = model.noise_chol();
    Vector phi, post;
    const double v = detail::joint_outer(xr, model, theta, zr, [&](const Vector& y) {
        detail::energies(wg, l.triangularView<Eigen::Lower>().solve(y), phi);
        detail::reweight_cells(atoms.weights(), phi, post);
        if (n == 1) return wp_discrete(atoms, EmpiricalMeasure(atoms.atoms(), post), 2.0).cost;
        return wp_discrete(atoms, detail::prune(atoms.atoms(), post), 2.0).cost;
    });
    return detail::nested(v, xr.size() * zr.size(), atoms.size(), theta);
}

// ---------------------------------------------------------------- EIG

/// Expected KL(posterior || prior). Closed form for linear-Gaussian problems; nested
/// quadrature on histogram cells (1D) or grid atoms (nD) otherwise.
inline UtilityEstimate eig_baseline(const Measure& prior, const GaussianNoiseModel& model, const Vector& theta,
                                    EigMethod method, const NestedOptions& opt = {}) {
    if (method == EigMethod::GaussianClosedForm) {
        const auto* g = std::get_if<GaussianMeasure>(&prior);
        if (!g || !model.forward().is_linear())
            throw ArgumentError("eig_baseline: closed form needs a Gaussian prior and linear map");
        auto u = eig_gaussian(LinearGaussianModel(model.forward().linear_operator(theta), model.noise_cov(), *g));
        u.theta = theta;
        return u;
    }
    const auto n = dim(prior);
    const QuadratureRule zr = detail::noise_rule_or_default(opt, model.output_dim());
    const QuadratureRule xr = detail::prior_rule_or_default(opt, prior);
    EmpiricalMeasure atoms = [&] {
        if (n == 1 && !std::holds_alternative<EmpiricalMeasure>(prior)) {
            const auto hist = detail::discretize_1d(prior, opt.posterior_cells);
            Matrix mids(1, hist.cells());
            for (Eigen::Index i = 0; i < hist.cells(); ++i) mids(0, i) = hist.mid(i);
            return EmpiricalMeasure(std::move(mids), hist.mass);
        }
        return detail::grid_atoms(prior, opt.eig_atoms_per_dim);
    }();
    const Matrix wg = detail::whitened_outputs(model, atoms.atoms(), theta);
    const auto& l = model.noise_chol();
    Vector phi, post;
    const double v = detail::joint_outer(xr, model, theta, zr, [&](const Vector& y) {
        detail::energies(wg, l.triangularView<Eigen::Lower>().solve(y), phi);
        detail::reweight_cells(atoms.weights(), phi, post);
        return detail::kl_cells(post, atoms.weights());
    });
    return detail::nested(v, xr.size() * zr.size(), atoms.size(), theta);
}

// ---------------------------------------------------------------- Monte Carlo

/// Double-loop Monte Carlo: joint draws (x, y), inner W_p^p between a fixed prior atom set
/// and its reweighting (1D: quantile midpoints of the prior; nD: grid atoms). stderr is
/// the sample standard deviation of the outer terms over sqrt(N).
inline UtilityEstimate u_monte_carlo(const Measure& prior, const GaussianNoiseModel& model, const Vector& theta,
                                     double p, int outer_samples, int inner_atoms, std::uint64_t seed) {
    if (outer_samples < 2) throw ArgumentError("u_monte_carlo: need at least two outer samples");
    const auto n = dim(prior);
    EmpiricalMeasure atoms = [&] {
        if (n == 1 && !std::holds_alternative<EmpiricalMeasure>(prior)) {
            Matrix q(1, inner_atoms);
            for (int i = 0; i < inner_atoms; ++i) q(0, i) = quantile_1d(prior, (i + 0.5) / inner_atoms);
            return EmpiricalMeasure::uniform(std::move(q));
        }
        return detail::grid_atoms(prior, inner_atoms);
    }();
    const auto [xs, ys] = sample_joint(prior, model, theta, outer_samples, seed);
    const Matrix wg = detail::whitened_outputs(model, atoms.atoms(), theta);
    const auto& l = model.noise_chol();
    Vector phi, post;
    double s = 0.0, s2 = 0.0;
    for (int k = 0; k < outer_samples; ++k) {
        detail::energies(wg, l.triangularView<Eigen::Lower>().solve(ys.col(k)), phi);
        detail::reweight_cells(atoms.weights(), phi, post);
        const double c = n == 1 ? wp_discrete(atoms, EmpiricalMeasure(atoms.atoms(), post), p).cost
                                : wp_discrete(atoms, detail::prune(atoms.atoms(), post), p).cost;
        s += c;
        s2 += c * c;
    }
    const double mean = s / outer_samples;
    const double var = std::max(s2 / outer_samples - mean * mean, 0.0) * outer_samples / (outer_samples - 1.0);
    UtilityEstimate u;
    u.value = mean;
    u.estimator = EstimatorKind::NestedMonteCarlo;
    u.std_error = std::sqrt(var / outer_samples);
    u.outer_count = outer_samples;
    u.inner_count = atoms.size();
    u.theta = theta;
    return u;
}

/// value <= 2^p M_p(prior) (1 + 1e-6) + 3 stderr
inline bool within_moment_bound(const UtilityEstimate& u, const Measure& prior, double p) {
    if (u.diverged) return false;
    const double bound = std::pow(2.0, p) * moment_p(prior, p) * (1.0 + 1e-6) + 3.0 * u.std_error.value_or(0.0);
    return u.value <= bound;
}

}  // namespace wassoed
