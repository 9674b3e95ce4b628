#pragma once

// Probability measures on R^n: Gaussian, weighted empirical (atoms), uniform on a box.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"
#include "wassoed/quadrature.hpp"
#include "wassoed/random.hpp"
#include "wassoed/special.hpp"

namespace wassoed {

class GaussianMeasure {
public:
    GaussianMeasure(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
        if (mean_.size() != cov_.rows() || cov_.rows() != cov_.cols())
            throw ArgumentError("GaussianMeasure: mean/covariance dimension mismatch");
        linalg::require_psd(cov_, "GaussianMeasure covariance");
        cov_ = linalg::symmetrize(cov_);
    }

    static GaussianMeasure scalar(double mean, double variance) {
        return {Vector::Constant(1, mean), Matrix::Constant(1, 1, variance)};
    }
    static GaussianMeasure standard(Eigen::Index n) { return {Vector::Zero(n), Matrix::Identity(n, n)}; }

    Eigen::Index dim() const { return mean_.size(); }
    const Vector& mean() const { return mean_; }
    const Matrix& cov() const { return cov_; }
    /// 1D standard deviation.
    double stddev() const { return std::sqrt(cov_(0, 0)); }

    double log_density(const Vector& x) const {
        Eigen::LLT<Matrix> llt(cov_);
        if (llt.info() != Eigen::Success) throw NumericError("GaussianMeasure: singular covariance");
        const Vector r = llt.matrixL().solve(x - mean_);
        const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        return -0.5 * (r.squaredNorm() + logdet + dim() * std::log(2.0 * std::numbers::pi));
    }

private:
    Vector mean_;
    Matrix cov_;
};

/// Weighted atoms; atoms.col(i) is the i-th support point.
class EmpiricalMeasure {
public:
    EmpiricalMeasure(Matrix atoms, Vector weights) : atoms_(std::move(atoms)), weights_(std::move(weights)) {
        if (atoms_.cols() != weights_.size()) throw ArgumentError("EmpiricalMeasure: atom/weight count mismatch");
        if (weights_.size() == 0) throw ArgumentError("EmpiricalMeasure: no atoms");
        if ((weights_.array() < 0.0).any()) throw ArgumentError("EmpiricalMeasure: negative weight");
        if (std::abs(weights_.sum() - 1.0) > 1e-12)
            throw ArgumentError("EmpiricalMeasure: weights must sum to 1");
        if (!atoms_.allFinite()) throw ArgumentError("EmpiricalMeasure: non-finite atom");
    }

    static EmpiricalMeasure uniform(Matrix atoms) {
        const auto n = atoms.cols();
        return {std::move(atoms), Vector::Constant(n, 1.0 / static_cast<double>(n))};
    }
    static EmpiricalMeasure uniform_1d(const std::vector<double>& xs) {
        Matrix a(1, static_cast<Eigen::Index>(xs.size()));
        for (std::size_t i = 0; i < xs.size(); ++i) a(0, static_cast<Eigen::Index>(i)) = xs[i];
        return uniform(std::move(a));
    }
    static EmpiricalMeasure weighted_1d(const std::vector<double>& xs, const std::vector<double>& ws) {
        Matrix a(1, static_cast<Eigen::Index>(xs.size()));
        Vector w(static_cast<Eigen::Index>(ws.size()));
        for (std::size_t i = 0; i < xs.size(); ++i) a(0, static_cast<Eigen::Index>(i)) = xs[i];
        for (std::size_t i = 0; i < ws.size(); ++i) w(static_cast<Eigen::Index>(i)) = ws[i];
        return {std::move(a), std::move(w)};
    }
    static EmpiricalMeasure dirac(const Vector& x) { return {Matrix(x), Vector::Ones(1)}; }

    Eigen::Index dim() const { return atoms_.rows(); }
    Eigen::Index size() const { return atoms_.cols(); }
    const Matrix& atoms() const { return atoms_; }
    const Vector& weights() const { return weights_; }

private:
    Matrix atoms_;
    Vector weights_;
};

class UniformBoxMeasure {
public:
    UniformBoxMeasure(Vector lower, Vector upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
        if (lower_.size() != upper_.size() || lower_.size() == 0)
            throw ArgumentError("UniformBoxMeasure: bound dimension mismatch");
        if (!(lower_.array() < upper_.array()).all())
            throw ArgumentError("UniformBoxMeasure: require lower < upper componentwise");
    }
    static UniformBoxMeasure interval(double lo, double hi) {
        return {Vector::Constant(1, lo), Vector::Constant(1, hi)};
    }
    static UniformBoxMeasure unit_cube(Eigen::Index n) { return {Vector::Zero(n), Vector::Ones(n)}; }

    Eigen::Index dim() const { return lower_.size(); }
    const Vector& lower() const { return lower_; }
    const Vector& upper() const { return upper_; }
    double volume() const { return (upper_ - lower_).prod(); }
    bool contains(const Vector& x) const {
        return (x.array() >= lower_.array()).all() && (x.array() <= upper_.array()).all();
    }
    double log_density(const Vector& x) const { return contains(x) ? -std::log(volume()) : -HUGE_VAL; }

private:
    Vector lower_;
    Vector upper_;
};

using Measure = std::variant<GaussianMeasure, EmpiricalMeasure, UniformBoxMeasure>;

inline Eigen::Index dim(const Measure& m) {
    return std::visit([](const auto& v) { return v.dim(); }, m);
}

// ---------------------------------------------------------------- sampling

inline EmpiricalMeasure sample(const GaussianMeasure& g, int count, std::uint64_t seed) {
    if (count < 1) throw ArgumentError("sample: count must be positive");
    Matrix chol;
    try {
        chol = linalg::cholesky_with_jitter(g.cov());
    } catch (const NumericError&) {
        throw ArgumentError("sample: covariance is singular; cannot factorize for sampling");
    }
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Matrix z(g.dim(), count);
    for (Eigen::Index j = 0; j < z.cols(); ++j)
        for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = normal(rng);
    Matrix atoms = (chol * z).colwise() + g.mean();
    return EmpiricalMeasure::uniform(std::move(atoms));
}

inline EmpiricalMeasure sample(const UniformBoxMeasure& u, int count, std::uint64_t seed) {
    if (count < 1) throw ArgumentError("sample: count must be positive");
    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Matrix atoms(u.dim(), count);
    for (Eigen::Index j = 0; j < atoms.cols(); ++j)
        for (Eigen::Index i = 0; i < atoms.rows(); ++i)
            atoms(i, j) = u.lower()(i) + (u.upper()(i) - u.lower()(i)) * unif(rng);
    return EmpiricalMeasure::uniform(std::move(atoms));
}

inline EmpiricalMeasure sample(const EmpiricalMeasure& e, int count, std::uint64_t seed) {
    if (count < 1) throw ArgumentError("sample: count must be positive");
    Rng rng(seed);
    std::discrete_distribution<Eigen::Index> pick(e.weights().data(), e.weights().data() + e.size());
    Matrix atoms(e.dim(), count);
    for (Eigen::Index j = 0; j < atoms.cols(); ++j) atoms.col(j) = e.atoms().col(pick(rng));
    return EmpiricalMeasure::uniform(std::move(atoms));
}

inline EmpiricalMeasure sample(const Measure& m, int count, std::uint64_t seed) {
    return std::visit([&](const auto& v) { return sample(v, count, seed); }, m);
}

// ---------------------------------------------------------------- moments

namespace detail {

inline void check_p(double p) {
    if (!(p >= 1.0) || !std::isfinite(p)) throw ArgumentError("moment_p: p must be a finite real >= 1");
}

// Composite Gauss-Legendre on [a,b] with `panels` panels of `order` points.
template <class F>
double composite_gl(F&& f, double a, double b, int panels, int order = 16) {
    static thread_local QuadratureRule base;
    if (base.size() != order) base = gauss_legendre(order, 0.0, 1.0);
    const double h = (b - a) / panels;
    double s = 0.0;
    for (int k = 0; k < panels; ++k) {
        const double lo = a + k * h;
        for (Eigen::Index i = 0; i < base.size(); ++i) s += base.weights(i) * h * f(lo + h * base.nodes(0, i));
    }
    return s;
}

}  // namespace detail

/// p-th absolute moment E||X||^p.
inline double moment_p(const EmpiricalMeasure& e, double p) {
    detail::check_p(p);
    double s = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i) s += e.weights()(i) * std::pow(e.atoms().col(i).norm(), p);
    return s;
}

inline double moment_p(const GaussianMeasure& g, double p) {
    detail::check_p(p);
    if (p == 2.0) return g.mean().squaredNorm() + g.cov().trace();
    if (g.dim() == 1) {
        const double m = g.mean()(0), s = g.stddev();
        if (s == 0.0) return std::pow(std::abs(m), p);
        if (p == 1.0) return special::mean_abs_normal(m, s);
        // integrate |m + s z|^p phi(z) split at the kink z0 = -m/s
        auto f = [&](double z) { return std::pow(std::abs(m + s * z), p) * special::normal_pdf(z); };
        const double z0 = std::clamp(-m / s, -40.0, 40.0);
        return detail::composite_gl(f, std::min(-40.0, z0), z0, 64) +
               detail::composite_gl(f, z0, std::max(40.0, z0), 64);
    }
    if (g.dim() > 3) throw UnsupportedDimensionError("moment_p: Gaussian p != 2 supported up to dimension 3");
    const Matrix chol = linalg::cholesky_with_jitter(g.cov() + 1e-300 * Matrix::Identity(g.dim(), g.dim()));
    const auto gh = gauss_hermite(g.dim() == 2 ? 64 : 32);
    const auto rule = gaussian_rule(tensor_product(std::vector<QuadratureRule>(g.dim(), gh)), g.mean(), chol);
    return integrate(rule, [&](const Vector& x) { return std::pow(x.norm(), p); });
}

inline double moment_p(const UniformBoxMeasure& u, double p) {
    detail::check_p(p);
    if (u.dim() == 1) {
        const double a = u.lower()(0), b = u.upper()(0);
        auto prim = [p](double x) { return std::copysign(std::pow(std::abs(x), p + 1.0), x) / (p + 1.0); };
        return (prim(b) - prim(a)) / (b - a);
    }
    if (p == 2.0) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < u.dim(); ++i) {
            const double a = u.lower()(i), b = u.upper()(i);
            s += (a * a + a * b + b * b) / 3.0;
        }
        return s;
    }
    if (u.dim() > 3) throw UnsupportedDimensionError("moment_p: uniform p != 2 supported up to dimension 3");
    std::vector<QuadratureRule> f;
    for (Eigen::Index i = 0; i < u.dim(); ++i) f.push_back(gauss_legendre(48, u.lower()(i), u.upper()(i)));
    return integrate(tensor_product(f), [&](const Vector& x) { return std::pow(x.norm(), p); }) / u.volume();
}

inline double moment_p(const Measure& m, double p) {
    return std::visit([&](const auto& v) { return moment_p(v, p); }, m);
}

// ---------------------------------------------------------------- 1D CDF / quantile

namespace detail {
inline void require_1d(Eigen::Index d, const char* what) {
    if (d != 1) throw UnsupportedDimensionError(std::string(what) + ": measure must be one-dimensional");
}
inline void require_unit_open(double u) {
    if (!(u > 0.0 && u < 1.0)) throw ArgumentError("quantile_1d: u must lie in (0,1)");
}
}  // namespace detail

inline double cdf_1d(const GaussianMeasure& g, double x) {
    detail::require_1d(g.dim(), "cdf_1d");
    const double s = g.stddev();
    if (s == 0.0) return x >= g.mean()(0) ? 1.0 : 0.0;
    return special::normal_cdf((x - g.mean()(0)) / s);
}

inline double quantile_1d(const GaussianMeasure& g, double u) {
    detail::require_1d(g.dim(), "quantile_1d");
    detail::require_unit_open(u);
    return g.mean()(0) + g.stddev() * special::normal_quantile(u);
}

inline double cdf_1d(const UniformBoxMeasure& m, double x) {
    detail::require_1d(m.dim(), "cdf_1d");
    const double a = m.lower()(0), b = m.upper()(0);
    return std::clamp((x - a) / (b - a), 0.0, 1.0);
}

inline double quantile_1d(const UniformBoxMeasure& m, double u) {
    detail::require_1d(m.dim(), "quantile_1d");
    detail::require_unit_open(u);
    return m.lower()(0) + u * (m.upper()(0) - m.lower()(0));
}

/// Sorted support and cumulative weights of a 1D empirical measure.
struct SortedAtoms1D {
    std::vector<double> x;    ///< ascending atoms
    std::vector<double> w;    ///< weights in the same order
    std::vector<double> cum;  ///< cum[i] = w[0] + ... + w[i]

    explicit SortedAtoms1D(const EmpiricalMeasure& e) {
        detail::require_1d(e.dim(), "SortedAtoms1D");
        std::vector<Eigen::Index> order(static_cast<std::size_t>(e.size()));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](auto a, auto b) { return e.atoms()(0, a) < e.atoms()(0, b); });
        double c = 0.0;
        for (auto i : order) {
            x.push_back(e.atoms()(0, i));
            w.push_back(e.weights()(i));
            c += e.weights()(i);
            cum.push_back(c);
        }
    }

    double cdf(double t) const {
        const auto it = std::upper_bound(x.begin(), x.end(), t);
        if (it == x.begin()) return 0.0;
        return std::min(1.0, cum[static_cast<std::size_t>(it - x.begin()) - 1]);
    }

    /// inf{x : F(x) >= u}
    double quantile(double u) const {
        const auto it = std::lower_bound(cum.begin(), cum.end(), u);
        if (it == cum.end()) return x.back();
        return x[static_cast<std::size_t>(it - cum.begin())];
    }
};

inline double cdf_1d(const EmpiricalMeasure& e, double x) {
    detail::require_1d(e.dim(), "cdf_1d");
    double s = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i)
        if (e.atoms()(0, i) <= x) s += e.weights()(i);
    return std::min(1.0, s);
}

inline double quantile_1d(const EmpiricalMeasure& e, double u) {
    detail::require_1d(e.dim(), "quantile_1d");
    detail::require_unit_open(u);
    return SortedAtoms1D(e).quantile(u);
}

inline double cdf_1d(const Measure& m, double x) {
    return std::visit([&](const auto& v) { return cdf_1d(v, x); }, m);
}
inline double quantile_1d(const Measure& m, double u) {
    return std::visit([&](const auto& v) { return quantile_1d(v, u); }, m);
}

// ---------------------------------------------------------------- CSV

/// Writes `w,x1,...,xn` with one atom per row.
inline void write_empirical_csv(std::ostream& os, const EmpiricalMeasure& e) {
    os << "w";
    for (Eigen::Index k = 0; k < e.dim(); ++k) os << ",x" << (k + 1);
    os << "\n";
    os.precision(17);
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        os << e.weights()(i);
        for (Eigen::Index k = 0; k < e.dim(); ++k) os << "," << e.atoms()(k, i);
        os << "\n";
    }
}

namespace detail {
inline double parse_double(const std::string& s, std::size_t line) {
    std::size_t used = 0;
    double v;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ParseError("not a number: '" + s + "'", line);
    }
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used]))) ++used;
    if (used != s.size()) throw ParseError("not a number: '" + s + "'", line);
    return v;
}
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}
}  // namespace detail

/// Reads the `w,x1,...,xn` format. Weights must sum to 1 within 1e-9 and are renormalized.
inline EmpiricalMeasure read_empirical_csv(std::istream& is) {
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(is, line)) throw ParseError("empty input: missing header", 1);
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "w") throw ParseError("header must be w,x1,...,xn", lineno);
    for (std::size_t k = 1; k < header.size(); ++k)
        if (header[k] != "x" + std::to_string(k)) throw ParseError("header must be w,x1,...,xn", lineno);
    const auto n = static_cast<Eigen::Index>(header.size() - 1);

    std::vector<double> ws;
    std::vector<double> xs;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (static_cast<Eigen::Index>(cells.size()) != n + 1)
            throw ParseError("expected " + std::to_string(n + 1) + " fields", lineno);
        const double w = detail::parse_double(cells[0], lineno);
        if (!(w >= 0.0) || !std::isfinite(w)) throw ParseError("weight must be finite and nonnegative", lineno);
        ws.push_back(w);
        for (Eigen::Index k = 0; k < n; ++k) {
            const double v = detail::parse_double(cells[static_cast<std::size_t>(k + 1)], lineno);
            if (!std::isfinite(v)) throw ParseError("coordinate must be finite", lineno);
            xs.push_back(v);
        }
    }
    if (ws.empty()) throw ParseError("no atoms", lineno);
    const double total = std::accumulate(ws.begin(), ws.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw ParseError("weights sum to " + std::to_string(total) + ", not 1", lineno);
    Matrix atoms(n, static_cast<Eigen::Index>(ws.size()));
    Vector weights(static_cast<Eigen::Index>(ws.size()));
    for (std::size_t i = 0; i < ws.size(); ++i) {
        weights(static_cast<Eigen::Index>(i)) = ws[i] / total;
        for (Eigen::Index k = 0; k < n; ++k)
            atoms(k, static_cast<Eigen::Index>(i)) = xs[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)];
    }
    weights /= weights.sum();
    return {std::move(atoms), std::move(weights)};
}

}  // namespace wassoed
