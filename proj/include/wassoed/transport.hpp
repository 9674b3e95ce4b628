#pragma once

// Transport maps: monotone 1D maps and a 2D Monge-Ampere solver (Kansa collocation
// with fourth-order thin-plate splines plus a quadratic tail).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"
#include "wassoed/measures.hpp"
#include "wassoed/quadrature.hpp"

namespace wassoed {

// ---------------------------------------------------------------- 1D maps

enum class MapDirection { PriorToPosterior, PosteriorToPrior, Unspecified };

/// Nondecreasing map T = Q_target o F_source. Gaussian pairs carry the affine form.
struct TransportMap1D {
    std::function<double(double)> source_cdf;
    std::function<double(double)> target_quantile;
    std::optional<std::pair<double, double>> affine;  ///< T(x) = first + second * x
    MapDirection direction = MapDirection::Unspecified;

    double operator()(double x) const {
        if (affine) return affine->first + affine->second * x;
        // keep u inside (0, 1) so the quantile stays finite
        const double u = std::clamp(source_cdf(x), 1e-300, 1.0 - 1e-16);
        return target_quantile(u);
    }
};

/// T(x) = F_target^{-1}(F_source(x)). The source must be atomless.
inline TransportMap1D transport_map_1d(const Measure& source, const Measure& target,
                                       MapDirection direction = MapDirection::Unspecified) {
    if (dim(source) != 1 || dim(target) != 1)
        throw UnsupportedDimensionError("transport_map_1d: both measures must be one-dimensional");
    if (std::holds_alternative<EmpiricalMeasure>(source))
        throw UnsupportedDimensionError("transport_map_1d: empirical source has no monotone map; use wp_discrete");
    TransportMap1D t;
    t.direction = direction;
    t.source_cdf = [source](double x) { return cdf_1d(source, x); };
    t.target_quantile = [target](double u) { return quantile_1d(target, u); };
    const auto* g1 = std::get_if<GaussianMeasure>(&source);
    const auto* g2 = std::get_if<GaussianMeasure>(&target);
    if (g1 && g2 && g1->cov()(0, 0) > 0.0) {
        const double b = g2->stddev() / g1->stddev();
        t.affine = std::make_pair(g2->mean()(0) - b * g1->mean()(0), b);
    }
    return t;
}

/// int |x - T(x)|^2 d source. `rule` is the standard rule for the source type:
/// probabilists' Gauss-Hermite for a Gaussian (mapped through mean and stddev),
/// a rule on the box for a uniform source (weights divided by the volume).
/// Empirical sources use their own atoms and ignore `rule`.
inline double transport_cost(const TransportMap1D& map, const Measure& source, const QuadratureRule& rule) {
    if (dim(source) != 1) throw UnsupportedDimensionError("transport_cost: 1D map needs a 1D source");
    double total = 0.0;
    auto add = [&](double w, double x) {
        const double d = x - map(x);
        if (!std::isfinite(d)) throw NumericError("transport_cost: non-finite map value at x = " + std::to_string(x));
        total += w * d * d;
    };
    if (const auto* g = std::get_if<GaussianMeasure>(&source)) {
        for (Eigen::Index i = 0; i < rule.size(); ++i) add(rule.weights(i), g->mean()(0) + g->stddev() * rule.nodes(0, i));
    } else if (const auto* u = std::get_if<UniformBoxMeasure>(&source)) {
        const double vol = u->volume();
        for (Eigen::Index i = 0; i < rule.size(); ++i) add(rule.weights(i) / vol, rule.nodes(0, i));
    } else {
        const auto& e = std::get<EmpiricalMeasure>(source);
        for (Eigen::Index i = 0; i < e.size(); ++i) add(e.weights()(i), e.atoms()(0, i));
    }
    return total;
}

// ---------------------------------------------------------------- Monge-Ampere

/// Probability density supported on a 2D box. The log density may be unnormalized;
/// the solver normalizes it over the box.
struct BoxDensity {
    Vector lower;
    Vector upper;
    std::function<double(const Vector&)> log_density;
    std::function<Vector(const Vector&)> grad_log_density;  // optional

    static BoxDensity uniform(const Vector& lo, const Vector& hi) {
        return {lo, hi, [](const Vector&) { return 0.0; }, [](const Vector& x) { return Vector::Zero(x.size()); }};
    }
    /// Gaussian restricted to the box.
    static BoxDensity gaussian(const GaussianMeasure& g, const Vector& lo, const Vector& hi) {
        Eigen::LLT<Matrix> llt(g.cov());
        if (llt.info() != Eigen::Success) throw ArgumentError("BoxDensity::gaussian: covariance must be positive definite");
        const Matrix prec = llt.solve(Matrix::Identity(g.dim(), g.dim()));
        const Vector m = g.mean();
        return {lo, hi, [prec, m](const Vector& x) { return -0.5 * (x - m).dot(prec * (x - m)); },
                [prec, m](const Vector& x) -> Vector { return -prec * (x - m); }};
    }
    Vector width() const { return upper - lower; }
    bool contains(const Vector& x) const {
        return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
    }
};

struct MongeAmpereOptions {
    int interior_count = 144;  ///< perfect square, uniform tensor layout
    int boundary_count = 48;   ///< multiple of 4, equal split per side, corners excluded
    int max_iterations = 200;
    double convexity_weight = 1e3;
    int max_penalty_doublings = 8;
    double overshoot_weight = 1e3;
    double residual_tolerance = 1e-4;  ///< relative interior RMS and boundary RMS targets
    bool initial_identity = true;      ///< phi0 = |x|^2/2; otherwise the box-to-box affine map
};

struct MongeAmpereReport {
    double interior_rms_rel = 0.0;  ///< RMS(det(D^2 phi) rho2(grad phi) - rho1) / RMS(rho1)
    double interior_log_rms = 0.0;  ///< RMS of the log-form residual that the solver minimizes
    double boundary_rms = 0.0;      ///< RMS of the Neumann residual, in target box widths
    double mean_value = 0.0;        ///< |int phi| / |Omega|
    double min_hessian_eig = 0.0;   ///< smallest Hessian eigenvalue over interior collocation points
    double min_boundary_hessian_eig = 0.0;
    double max_overshoot = 0.0;     ///< worst excursion of grad phi outside the target box, in widths
    int iterations = 0;
    std::vector<double> history;    ///< merit per accepted iteration
};

namespace detail {

// psi(r) = r^4 log r; gradient and Hessian in terms of d = x - c.
inline void tps(const Eigen::Vector2d& d, double& v, Eigen::Vector2d& g, Eigen::Matrix2d& h) {
    const double r2 = d.squaredNorm();
    if (r2 == 0.0) {
        v = 0.0;
        g.setZero();
        h.setZero();
        return;
    }
    const double lr = 0.5 * std::log(r2);
    v = r2 * r2 * lr;
    g = r2 * (4.0 * lr + 1.0) * d;
    h = r2 * (4.0 * lr + 1.0) * Eigen::Matrix2d::Identity() + (8.0 * lr + 6.0) * d * d.transpose();
}

struct BasisRows {
    Eigen::RowVectorXd v, gx, gy, hxx, hxy, hyy;
};

}  // namespace detail

/// phi(x) = sum_k lambda_k psi(|xi - c_k|) + sum_j alpha_j p_j(xi), written in the
/// scaled coordinate xi = (x - lower) / width of the source box.
class MongeAmperePotential {
public:
    MongeAmperePotential() = default;
    MongeAmperePotential(Matrix centers, Eigen::Index interior_count, Vector lower, Vector width, Vector target_lower,
                         Vector target_upper)
        : centers_(std::move(centers)), interior_count_(interior_count), lower_(std::move(lower)),
          width_(std::move(width)), target_lower_(std::move(target_lower)), target_upper_(std::move(target_upper)),
          coef_(Vector::Zero(centers_.cols() + 6)) {}

    Eigen::Index center_count() const { return centers_.cols(); }
    Eigen::Index interior_count() const { return interior_count_; }
    /// Collocation points in x coordinates.
    Matrix collocation_points() const {
        return (centers_.array().colwise() * width_.array()).colwise() + lower_.array();
    }
    const Vector& coefficients() const { return coef_; }
    Vector& coefficients() { return coef_; }
    Vector lambda() const { return coef_.head(center_count()); }
    Vector alpha() const { return coef_.tail(6); }
    const Vector& lower() const { return lower_; }
    const Vector& width() const { return width_; }
    Vector upper() const { return lower_ + width_; }
    const Vector& target_lower() const { return target_lower_; }
    const Vector& target_upper() const { return target_upper_; }
    MongeAmpereReport& report() { return report_; }
    const MongeAmpereReport& report() const { return report_; }

    Eigen::Vector2d to_xi(const Vector& x) const {
        return {(x(0) - lower_(0)) / width_(0), (x(1) - lower_(1)) / width_(1)};
    }

    /// Basis values and derivatives (in xi) at xi.
    detail::BasisRows basis(const Eigen::Vector2d& xi) const {
        const Eigen::Index n = center_count(), p = n + 6;
        detail::BasisRows b{Eigen::RowVectorXd(p), Eigen::RowVectorXd(p), Eigen::RowVectorXd(p),
                            Eigen::RowVectorXd(p), Eigen::RowVectorXd(p), Eigen::RowVectorXd(p)};
        double v;
        Eigen::Vector2d g;
        Eigen::Matrix2d h;
        for (Eigen::Index k = 0; k < n; ++k) {
            detail::tps(xi - centers_.col(k).head<2>(), v, g, h);
            b.v(k) = v;
            b.gx(k) = g(0);
            b.gy(k) = g(1);
            b.hxx(k) = h(0, 0);
            b.hxy(k) = h(0, 1);
            b.hyy(k) = h(1, 1);
        }
        const double s = xi(0), t = xi(1);
        b.v.tail(6) << 1.0, s, t, s * s, s * t, t * t;
        b.gx.tail(6) << 0.0, 1.0, 0.0, 2.0 * s, t, 0.0;
        b.gy.tail(6) << 0.0, 0.0, 1.0, 0.0, s, 2.0 * t;
        b.hxx.tail(6) << 0.0, 0.0, 0.0, 2.0, 0.0, 0.0;
        b.hxy.tail(6) << 0.0, 0.0, 0.0, 0.0, 1.0, 0.0;
        b.hyy.tail(6) << 0.0, 0.0, 0.0, 0.0, 0.0, 2.0;
        return b;
    }

    double value(const Vector& x) const { return basis(to_xi(x)).v.dot(coef_); }
    /// The transport map grad phi(x).
    Vector map(const Vector& x) const {
        const auto b = basis(to_xi(x));
        return Vector(Eigen::Vector2d(b.gx.dot(coef_) / width_(0), b.gy.dot(coef_) / width_(1)));
    }
    Matrix hessian(const Vector& x) const {
        const auto b = basis(to_xi(x));
        Matrix h(2, 2);
        h(0, 0) = b.hxx.dot(coef_) / (width_(0) * width_(0));
        h(0, 1) = h(1, 0) = b.hxy.dot(coef_) / (width_(0) * width_(1));
        h(1, 1) = b.hyy.dot(coef_) / (width_(1) * width_(1));
        return h;
    }

private:
    Matrix centers_;  // 2 x N in xi coordinates, interior first
    Eigen::Index interior_count_ = 0;
    Vector lower_, width_;
    Vector target_lower_, target_upper_;
    Vector coef_;
    MongeAmpereReport report_;
};

namespace detail {

// log of int_box exp(log_density) by tensor Gauss-Legendre.
inline double log_mass(const BoxDensity& rho, int n = 64) {
    const auto rule = tensor_product({gauss_legendre(n, rho.lower(0), rho.upper(0)),
                                      gauss_legendre(n, rho.lower(1), rho.upper(1))});
    Vector lv(rule.size());
    for (Eigen::Index i = 0; i < rule.size(); ++i) lv(i) = rho.log_density(rule.nodes.col(i)) + std::log(rule.weights(i));
    const double mx = lv.maxCoeff();
    return mx + std::log((lv.array() - mx).exp().sum());
}

inline Vector grad_log(const BoxDensity& rho, const Vector& x) {
    if (rho.grad_log_density) return rho.grad_log_density(x);
    Vector g(2);
    for (int i = 0; i < 2; ++i) {
        const double h = 1e-6 * (rho.upper(i) - rho.lower(i));
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        g(i) = (rho.log_density(xp) - rho.log_density(xm)) / (2.0 * h);
    }
    return g;
}

// log f extended linearly below delta, so the merit stays finite for nonconvex iterates.
inline double soft_log(double lam, double delta, double& dlog) {
    if (lam >= delta) {
        dlog = 1.0 / lam;
        return std::log(lam);
    }
    dlog = 1.0 / delta;
    return std::log(delta) + (lam - delta) / delta;
}

}  // namespace detail

/// Solves det D^2 phi = rho1 / rho2(grad phi) on the source box with the
/// box-to-box Neumann condition (grad phi maps each face of the source box to the
/// matching face of the target box; for equal boxes this is grad phi . n = x . n),
/// zero mean and convexity penalties at the boundary points.
inline MongeAmperePotential solve_monge_ampere(const BoxDensity& rho1, const BoxDensity& rho2,
                                               const MongeAmpereOptions& opt = {}) {
    if (rho1.lower.size() != 2 || rho2.lower.size() != 2)
        throw UnsupportedDimensionError("solve_monge_ampere: only two-dimensional boxes are supported");
    if (!(rho1.width().array() > 0).all() || !(rho2.width().array() > 0).all())
        throw ArgumentError("solve_monge_ampere: boxes must have positive width");
    const int ni = static_cast<int>(std::lround(std::sqrt(static_cast<double>(opt.interior_count))));
    if (ni * ni != opt.interior_count || ni < 2)
        throw ArgumentError("solve_monge_ampere: interior_count must be a perfect square >= 4");
    if (opt.boundary_count < 4 || opt.boundary_count % 4 != 0)
        throw ArgumentError("solve_monge_ampere: boundary_count must be a positive multiple of 4");
    const int nb = opt.boundary_count / 4;

    const Vector lo1 = rho1.lower, w1 = rho1.width(), lo2 = rho2.lower, hi2 = rho2.upper, w2 = rho2.width();
    const Eigen::Index n_int = opt.interior_count, n_bd = opt.boundary_count, n_c = n_int + n_bd, n_p = n_c + 6;

    // collocation points in xi; boundary normal axis and side for each boundary point
    Matrix centers(2, n_c);
    for (int i = 0; i < ni; ++i)
        for (int j = 0; j < ni; ++j) centers.col(i * ni + j) << (i + 0.5) / ni, (j + 0.5) / ni;
    std::vector<int> axis(static_cast<std::size_t>(n_bd)), side(static_cast<std::size_t>(n_bd));
    for (int s = 0; s < 4; ++s)
        for (int k = 0; k < nb; ++k) {
            const Eigen::Index c = n_int + s * nb + k;
            const double t = (k + 0.5) / nb;
            const int ax = s / 2, sd = s % 2;  // s: 0 -> xi1 = 0, 1 -> xi1 = 1, 2 -> xi2 = 0, 3 -> xi2 = 1
            if (ax == 0)
                centers.col(c) << sd, t;
            else
                centers.col(c) << t, sd;
            axis[static_cast<std::size_t>(c - n_int)] = ax;
            side[static_cast<std::size_t>(c - n_int)] = sd;
        }
    MongeAmperePotential pot(centers, n_int, lo1, w1, lo2, hi2);

    const double log_m1 = detail::log_mass(rho1), log_m2 = detail::log_mass(rho2);
    const double log_jac = 2.0 * std::log(w1(0) * w1(1));

    std::vector<detail::BasisRows> rows(static_cast<std::size_t>(n_c));
    for (Eigen::Index k = 0; k < n_c; ++k) rows[static_cast<std::size_t>(k)] = pot.basis(centers.col(k));
    Vector lr1(n_int);
    for (Eigen::Index k = 0; k < n_int; ++k)
        lr1(k) = rho1.log_density(pot.collocation_points().col(k)) - log_m1;

    // mean over the unit square, by tensor Gauss-Legendre
    Eigen::RowVectorXd avg = Eigen::RowVectorXd::Zero(n_p);
    {
        const auto rule = tensor_product({gauss_legendre(24, 0, 1), gauss_legendre(24, 0, 1)});
        for (Eigen::Index i = 0; i < rule.size(); ++i) avg += rule.weights(i) * pot.basis(rule.nodes.col(i)).v;
    }
    // side conditions sum_k lambda_k p_j(c_k) = 0
    Matrix side_rows = Matrix::Zero(6, n_p);
    for (Eigen::Index k = 0; k < n_c; ++k) side_rows.col(k) = rows[static_cast<std::size_t>(k)].v.tail(6).transpose();

    // initial potential
    {
        Vector& c = pot.coefficients();
        c.setZero();
        if (opt.initial_identity) {
            // |x|^2 / 2 with x = lo + w xi
            c(n_c + 0) = 0.5 * lo1.squaredNorm();
            c(n_c + 1) = lo1(0) * w1(0);
            c(n_c + 2) = lo1(1) * w1(1);
            c(n_c + 3) = 0.5 * w1(0) * w1(0);
            c(n_c + 5) = 0.5 * w1(1) * w1(1);
        } else {
            // grad phi(x) = lo2 + (w2 / w1) (x - lo1), i.e. d phi / d xi_i = w1_i lo2_i + w2_i xi_i
            c(n_c + 1) = w1(0) * lo2(0);
            c(n_c + 2) = w1(1) * lo2(1);
            c(n_c + 3) = 0.5 * w1(0) * w2(0);
            c(n_c + 5) = 0.5 * w1(1) * w2(1);
        }
        c(n_c) -= avg.dot(c);
    }

    const double hscale = w1(0) * w2(0) + w1(1) * w2(1);
    const double delta = 1e-8 * hscale;
    const Eigen::Index n_rows = n_int + 2 * n_int + n_bd + 5 + 1 + n_bd;

    auto hess_xi = [&](const detail::BasisRows& b, const Vector& c) {
        Eigen::Matrix2d h;
        h(0, 0) = b.hxx.dot(c);
        h(0, 1) = h(1, 0) = b.hxy.dot(c);
        h(1, 1) = b.hyy.dot(c);
        return h;
    };

    // Residual and Jacobian of the penalized collocation system.
    auto assemble = [&](const Vector& c, double wconv, Vector& r, Matrix* jac) {
        r.setZero(n_rows);
        if (jac) jac->setZero(n_rows, n_p);
        Eigen::Index row = 0;
        for (Eigen::Index k = 0; k < n_int; ++k, ++row) {
            const auto& b = rows[static_cast<std::size_t>(k)];
            const Eigen::Matrix2d h = hess_xi(b, c);
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(h);
            double d0, d1;
            const double l0 = detail::soft_log(es.eigenvalues()(0), delta, d0);
            const double l1 = detail::soft_log(es.eigenvalues()(1), delta, d1);
            Vector y(2);
            y << b.gx.dot(c) / w1(0), b.gy.dot(c) / w1(1);
            Vector yc = y.cwiseMax(lo2).cwiseMin(hi2);  // continuous extension outside the target box
            const double lr2 = rho2.log_density(yc) - log_m2;
            r(row) = l0 + l1 - log_jac - lr1(k) + lr2;
            // overshoot rows
            for (int i = 0; i < 2; ++i) {
                const double over = std::max(0.0, y(i) - hi2(i)) + std::max(0.0, lo2(i) - y(i));
                r(n_int + 2 * k + i) = opt.overshoot_weight * over / w2(i);
            }
            if (jac) {
                const Eigen::Vector2d v0 = es.eigenvectors().col(0), v1 = es.eigenvectors().col(1);
                auto dq = [&](const Eigen::Vector2d& v) {
                    return Eigen::RowVectorXd(v(0) * v(0) * b.hxx + 2.0 * v(0) * v(1) * b.hxy + v(1) * v(1) * b.hyy);
                };
                Eigen::RowVectorXd jr = d0 * dq(v0) + d1 * dq(v1);
                const Vector g2 = detail::grad_log(rho2, yc);
                for (int i = 0; i < 2; ++i) {
                    const Eigen::RowVectorXd dy = (i == 0 ? b.gx : b.gy) / w1(i);
                    const bool inside = y(i) >= lo2(i) && y(i) <= hi2(i);
                    if (inside) jr += g2(i) * dy;
                    if (y(i) > hi2(i)) jac->row(n_int + 2 * k + i) = opt.overshoot_weight * dy / w2(i);
                    if (y(i) < lo2(i)) jac->row(n_int + 2 * k + i) = -opt.overshoot_weight * dy / w2(i);
                }
                jac->row(row) = jr;
            }
        }
        row += 2 * n_int;
        for (Eigen::Index q = 0; q < n_bd; ++q, ++row) {
            const auto& b = rows[static_cast<std::size_t>(n_int + q)];
            const int ax = axis[static_cast<std::size_t>(q)];
            const double target = side[static_cast<std::size_t>(q)] ? hi2(ax) : lo2(ax);
            const Eigen::RowVectorXd& g = ax == 0 ? b.gx : b.gy;
            r(row) = (g.dot(c) / w1(ax) - target) / w2(ax);
            if (jac) jac->row(row) = g / (w1(ax) * w2(ax));
        }
        // The constant side condition (sum of lambda) is left out: with it the collocation
        // system has one more equation than free unknowns and stalls short of zero residual.
        for (int j = 1; j < 6; ++j, ++row) {
            r(row) = side_rows.row(j).dot(c);
            if (jac) jac->row(row) = side_rows.row(j);
        }
        r(row) = avg.dot(c) / hscale;
        if (jac) jac->row(row) = avg / hscale;
        ++row;
        for (Eigen::Index q = 0; q < n_bd; ++q, ++row) {
            const auto& b = rows[static_cast<std::size_t>(n_int + q)];
            const Eigen::Matrix2d h = hess_xi(b, c);
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(h);
            const double gap = delta - es.eigenvalues()(0);
            if (gap > 0.0) {
                r(row) = wconv * gap / hscale;
                if (jac) {
                    const Eigen::Vector2d v = es.eigenvectors().col(0);
                    jac->row(row) = -wconv / hscale * (v(0) * v(0) * b.hxx + 2.0 * v(0) * v(1) * b.hxy + v(1) * v(1) * b.hyy);
                }
            }
        }
    };

    auto& rep = pot.report();
    double wconv = opt.convexity_weight;
    Vector r, r_try;
    Matrix jac;
    int total_it = 0;
    for (int round = 0; round <= opt.max_penalty_doublings; ++round) {
        Vector& c = pot.coefficients();
        assemble(c, wconv, r, &jac);
        double merit = 0.5 * r.squaredNorm();
        double mu = 1e-6;
        int slow = 0;
        for (int it = 0; it < opt.max_iterations; ++it, ++total_it) {
            rep.history.push_back(merit);
            if (r.lpNorm<Eigen::Infinity>() < 1e-9) break;
            // stagnation: tiny relative progress, or slow progress once residuals are far below tolerance
            const double progress = it > 0 ? rep.history[rep.history.size() - 2] - merit : merit;
            if (progress < 1e-3 * merit || (progress < 0.1 * merit && r.lpNorm<Eigen::Infinity>() < 1e-7)) {
                if (++slow >= 3) break;
            } else {
                slow = 0;
            }
            // Levenberg-Marquardt step by QR on the augmented system, columns scaled.
            Vector scale = jac.colwise().norm().transpose();
            for (Eigen::Index j = 0; j < scale.size(); ++j) scale(j) = scale(j) > 0.0 ? scale(j) : 1.0;
            const Matrix js = jac * scale.cwiseInverse().asDiagonal();
            bool accepted = false;
            for (int tries = 0; tries < 30; ++tries) {
                Matrix aug(n_rows + n_p, n_p);
                aug << js, std::sqrt(mu) * Matrix::Identity(n_p, n_p);
                Vector rhs(n_rows + n_p);
                rhs << -r, Vector::Zero(n_p);
                const Vector step = aug.colPivHouseholderQr().solve(rhs).cwiseQuotient(scale);
                const Vector c_try = c + step;
                assemble(c_try, wconv, r_try, nullptr);
                const double m_try = 0.5 * r_try.squaredNorm();
                if (std::isfinite(m_try) && m_try < merit) {
                    c = c_try;
                    merit = m_try;
                    mu = std::max(mu * 0.3, 1e-15);
                    accepted = true;
                    break;
                }
                mu *= 10.0;
            }
            if (!accepted) break;
            assemble(c, wconv, r, &jac);
        }
        // convexity at boundary points; double the penalty weight if violated
        double worst = std::numeric_limits<double>::infinity();
        for (Eigen::Index q = 0; q < n_bd; ++q)
            worst = std::min(worst, pot.hessian(pot.collocation_points().col(n_int + q)).selfadjointView<Eigen::Lower>()
                                        .eigenvalues()
                                        .minCoeff());
        rep.min_boundary_hessian_eig = worst;
        if (worst >= -1e-8) break;
        wconv *= 2.0;
    }
    rep.iterations = total_it;

    // report on the collocation points
    const Matrix pts = pot.collocation_points();
    double num = 0.0, den = 0.0, lsum = 0.0, bsum = 0.0, min_eig = std::numeric_limits<double>::infinity(), over = 0.0;
    assemble(pot.coefficients(), wconv, r, nullptr);
    for (Eigen::Index k = 0; k < n_int; ++k) {
        const Vector x = pts.col(k);
        const Matrix h = pot.hessian(x);
        const Vector y = pot.map(x);
        const Vector yc = y.cwiseMax(lo2).cwiseMin(hi2);
        const double r1 = std::exp(lr1(k));
        const double r2 = rho2.contains(y) ? std::exp(rho2.log_density(yc) - log_m2) : 1e-12;
        const double res = h.determinant() * r2 - r1;
        num += res * res;
        den += r1 * r1;
        lsum += r(k) * r(k);
        min_eig = std::min(min_eig, h.selfadjointView<Eigen::Lower>().eigenvalues().minCoeff());
        for (int i = 0; i < 2; ++i) over = std::max(over, std::max(y(i) - hi2(i), lo2(i) - y(i)) / w2(i));
    }
    for (Eigen::Index q = 0; q < n_bd; ++q) bsum += r(3 * n_int + q) * r(3 * n_int + q);
    rep.interior_rms_rel = std::sqrt(num / std::max(den, 1e-300));
    rep.interior_log_rms = std::sqrt(lsum / static_cast<double>(n_int));
    rep.boundary_rms = std::sqrt(bsum / static_cast<double>(n_bd));
    rep.mean_value = std::abs(avg.dot(pot.coefficients()));
    rep.min_hessian_eig = min_eig;
    rep.max_overshoot = std::max(0.0, over);

    const bool ok = rep.interior_rms_rel <= opt.residual_tolerance && rep.boundary_rms <= opt.residual_tolerance &&
                    rep.mean_value <= 1e-6 && rep.min_boundary_hessian_eig >= -1e-8;
    if (!ok)
        throw ConvergenceError("solve_monge_ampere: collocation residuals above tolerance (interior " +
                                   std::to_string(rep.interior_rms_rel) + ", boundary " +
                                   std::to_string(rep.boundary_rms) + ")",
                               rep.history);
    return pot;
}

/// int |x - grad phi(x)|^2 rho1(x) dx with `rule` on the source box (weights sum to its area).
inline double transport_cost(const MongeAmperePotential& pot, const BoxDensity& source, const QuadratureRule& rule) {
    const double lm = detail::log_mass(source);
    double total = 0.0;
    for (Eigen::Index i = 0; i < rule.size(); ++i) {
        const Vector x = rule.nodes.col(i);
        const double w = rule.weights(i) * std::exp(source.log_density(x) - lm);
        total += w * (x - pot.map(x)).squaredNorm();
    }
    if (!std::isfinite(total)) throw NumericError("transport_cost: non-finite value");
    return total;
}

/// CSV `kind,index,x1,x2,coef`: one `rbf` row per center (x coordinates), one `poly` row per
/// polynomial coefficient in the scaled coordinate xi = (x - lower) / width.
inline void write_potential_csv(std::ostream& os, const MongeAmperePotential& pot) {
    os.precision(17);
    os << "kind,index,x1,x2,coef\n";
    const Matrix pts = pot.collocation_points();
    for (Eigen::Index k = 0; k < pot.center_count(); ++k)
        os << (k < pot.interior_count() ? "rbf_interior," : "rbf_boundary,") << k << ',' << pts(0, k) << ','
           << pts(1, k) << ',' << pot.coefficients()(k) << '\n';
    for (int j = 0; j < 6; ++j) os << "poly," << j << ",,," << pot.coefficients()(pot.center_count() + j) << '\n';
}

}  // namespace wassoed
