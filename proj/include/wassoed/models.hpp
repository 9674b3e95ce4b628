#pragma once

// Forward models used by the experiments: the scalar design model, the
// two-output nonlinear map on [0,1], and point-source localisation for the
// heat equation with a polynomial chaos surrogate.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "wassoed/bayes.hpp"
#include "wassoed/measures.hpp"
#include "wassoed/quadrature.hpp"
#include "wassoed/random.hpp"

namespace wassoed {

// ---------------------------------------------------------------- 1D model

/// G(x; theta) = 5 theta^6 x, theta in [-1, 1].
inline ForwardModel linear_1d_model() {
    ForwardModel f;
    f.name = "linear1d";
    f.input_dim = f.output_dim = f.design_dim = 1;
    f.eval = [](const Vector& x, const Vector& t) -> Vector { return 5.0 * std::pow(t(0), 6) * x; };
    f.linear_operator = [](const Vector& t) { return Matrix::Constant(1, 1, 5.0 * std::pow(t(0), 6)); };
    return f;
}

inline GaussianNoiseModel linear_1d_noise_model(double sigma = 0.05) {
    return {linear_1d_model(), Matrix::Constant(1, 1, sigma * sigma)};
}

inline GaussianMeasure linear_1d_prior() { return GaussianMeasure::scalar(0.0, 1.0); }

// ----------------------------------------------------------- example 1

/// G(x; theta)_i = x^3 theta_i^2 + x exp(-|0.2 - theta_i|), x in [0,1], theta in [0,1]^2.
inline ForwardModel example1_model() {
    ForwardModel f;
    f.name = "example1";
    f.input_dim = 1;
    f.output_dim = 2;
    f.design_dim = 2;
    f.eval = [](const Vector& x, const Vector& t) -> Vector {
        const double s = x(0), s3 = s * s * s;
        Vector y(2);
        for (int i = 0; i < 2; ++i) y(i) = s3 * t(i) * t(i) + s * std::exp(-std::abs(0.2 - t(i)));
        return y;
    };
    return f;
}

inline GaussianNoiseModel example1_noise_model(double noise_var = 1e-4) {
    return {example1_model(), noise_var * Matrix::Identity(2, 2)};
}

inline UniformBoxMeasure example1_prior() { return UniformBoxMeasure::interval(0.0, 1.0); }

// -------------------------------------------------------- heat equation

struct HeatSolverConfig {
    int grid = 64;  ///< intervals per axis; nodes at i / grid, i = 0..grid
    double dt = 0.004;
    double horizon = 0.4;
    double width = 0.05;   ///< source width h
    double cutoff = 0.3;   ///< source switched off after tau
    std::vector<double> obs_times{0.08, 0.16, 0.24, 0.32, 0.40};
    double amplitude = 1.0;  ///< 0 disables the source (test hook)

    int steps_for(double t) const { return static_cast<int>(std::lround(t / dt)); }

    void validate() const {
        if (grid < 2) throw ArgumentError("HeatSolverConfig: grid must be >= 2");
        if (!(dt > 0.0) || dt > 0.01) throw ArgumentError("HeatSolverConfig: dt must lie in (0, 0.01]");
        if (!(width > 0.0)) throw ArgumentError("HeatSolverConfig: width must be positive");
        if (obs_times.empty()) throw ArgumentError("HeatSolverConfig: no observation times");
        const auto on_grid = [&](double t) { return std::abs(steps_for(t) * dt - t) < 1e-9; };
        if (!on_grid(horizon) || !on_grid(cutoff))
            throw ArgumentError("HeatSolverConfig: horizon and cutoff must be multiples of dt");
        double prev = 0.0;
        for (double t : obs_times) {
            if (!on_grid(t)) throw ArgumentError("HeatSolverConfig: observation time off the time grid");
            if (t <= prev || t > horizon + 1e-12) throw ArgumentError("HeatSolverConfig: bad observation times");
            prev = t;
        }
    }

    double spacing() const { return 1.0 / grid; }

    std::string key() const {
        std::ostringstream os;
        os.precision(17);
        os << "heat;n=" << grid << ";dt=" << dt << ";T=" << horizon << ";h=" << width << ";tau=" << cutoff
           << ";a=" << amplitude << ";t=";
        for (double t : obs_times) os << t << ',';
        return os.str();
    }
};

/// Field snapshots at the observation times on the vertex mesh,
/// entry (i, j) at z = (i, j) * spacing.
struct HeatSolution {
    std::vector<Matrix> snapshots;
    double spacing = 0.0;

    /// Bilinear reading at theta in [0,1]^2 for every observation time.
    Vector read(const Vector& theta) const {
        const Eigen::Index n = snapshots.front().rows();
        const auto cell = [&](double z, Eigen::Index& i, double& f) {
            const double s = std::clamp(z, 0.0, 1.0) / spacing;
            i = std::min<Eigen::Index>(static_cast<Eigen::Index>(s), n - 2);
            f = s - static_cast<double>(i);
        };
        Eigen::Index i, j;
        double fx, fy;
        cell(theta(0), i, fx);
        cell(theta(1), j, fy);
        Vector y(static_cast<Eigen::Index>(snapshots.size()));
        for (std::size_t k = 0; k < snapshots.size(); ++k) {
            const Matrix& v = snapshots[k];
            y(static_cast<Eigen::Index>(k)) = (1 - fx) * (1 - fy) * v(i, j) + fx * (1 - fy) * v(i + 1, j) +
                                               (1 - fx) * fy * v(i, j + 1) + fx * fy * v(i + 1, j + 1);
        }
        return y;
    }

    /// Trapezoid-rule integral of snapshot k.
    double mass(std::size_t k) const {
        const Matrix& v = snapshots[k];
        const Eigen::Index n = v.rows();
        Vector w = Vector::Ones(n);
        w(0) = w(n - 1) = 0.5;
        return spacing * spacing * w.dot(v * w);
    }
};

namespace detail {

// 1D second-difference Laplacian with ghost-point Neumann rows, diagonalised
// through its trapezoid-weighted symmetric form: L = V diag(lambda) V^{-1}.
struct NeumannEigen {
    Matrix v, v_inv;
    Vector lambda;

    explicit NeumannEigen(int n) {
        const double h = 1.0 / (n - 1);
        Matrix l = Matrix::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            l(i, i) = -2.0;
            if (i > 0) l(i, i - 1) = 1.0;
            if (i < n - 1) l(i, i + 1) = 1.0;
        }
        l(0, 1) = 2.0;
        l(n - 1, n - 2) = 2.0;
        l /= h * h;
        Vector sw = Vector::Ones(n);
        sw(0) = sw(n - 1) = std::sqrt(0.5);
        const Matrix ls = linalg::symmetrize(sw.asDiagonal() * l * sw.cwiseInverse().asDiagonal());
        Eigen::SelfAdjointEigenSolver<Matrix> es(ls);
        lambda = es.eigenvalues();
        v = sw.cwiseInverse().asDiagonal() * es.eigenvectors();
        v_inv = es.eigenvectors().transpose() * sw.asDiagonal();
    }
};

inline const NeumannEigen& neumann_eigen(int n) {
    thread_local std::vector<std::unique_ptr<NeumannEigen>> cache;
    for (const auto& e : cache)
        if (e->lambda.size() == n) return *e;
    cache.push_back(std::make_unique<NeumannEigen>(n));
    return *cache.back();
}

}  // namespace detail

/// Crank-Nicolson solve of v_t = Lap v + S(., x) on [0,1]^2 with zero-flux
/// boundaries and v(., 0) = 0. S = a/(pi h^2) exp(-|z-x|^2 / 2h^2) while t <= tau.
/// The CN system is diagonal in the eigenbasis of the 1D Neumann Laplacian, so
/// each step is an elementwise update.
inline HeatSolution solve_heat(const HeatSolverConfig& cfg, const Vector& x) {
    cfg.validate();
    if (x.size() != 2) throw ArgumentError("solve_heat: source location must be 2D");
    const int n = cfg.grid + 1;
    const double hz = cfg.spacing();
    const auto& eig = detail::neumann_eigen(n);

    Matrix s(n, n);
    const double c = cfg.amplitude / (std::numbers::pi * cfg.width * cfg.width);
    const double inv2h2 = 1.0 / (2.0 * cfg.width * cfg.width);
    Vector gx(n), gy(n);
    for (int i = 0; i < n; ++i) {
        gx(i) = std::exp(-std::pow(i * hz - x(0), 2) * inv2h2);
        gy(i) = std::exp(-std::pow(i * hz - x(1), 2) * inv2h2);
    }
    s = c * gx * gy.transpose();
    const Matrix s_hat = eig.v_inv * s * eig.v_inv.transpose();

    Matrix amp(n, n), gain(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const double lam = 0.5 * cfg.dt * (eig.lambda(a) + eig.lambda(b));
            amp(a, b) = (1.0 + lam) / (1.0 - lam);
            gain(a, b) = cfg.dt / (1.0 - lam);
        }

    HeatSolution out;
    out.spacing = hz;
    Matrix u_hat = Matrix::Zero(n, n);
    const int on_steps = cfg.steps_for(cfg.cutoff);
    std::size_t next = 0;
    const int total = cfg.steps_for(cfg.obs_times.back());
    for (int k = 1; k <= total; ++k) {
        u_hat = amp.cwiseProduct(u_hat);
        if (k <= on_steps) u_hat += gain.cwiseProduct(s_hat);
        if (k == cfg.steps_for(cfg.obs_times[next])) {
            Matrix u = eig.v * u_hat * eig.v.transpose();
            if (!u.allFinite() || u.cwiseAbs().maxCoeff() > 1e10)
                throw NumericError("solve_heat: field blew up at step " + std::to_string(k));
            out.snapshots.push_back(std::move(u));
            ++next;
        }
    }
    return out;
}

/// Sensor readings y = [v(theta, t_1), ..., v(theta, t_K)].
inline Vector heat_forward(const HeatSolverConfig& cfg, const Vector& x, const Vector& theta) {
    return solve_heat(cfg, x).read(theta);
}

// ------------------------------------------------------------ surrogate

struct PCEOptions {
    int degree = 8;           ///< per-axis Legendre degree
    int training_points = 17; ///< Clenshaw-Curtis nodes per axis
    bool log_readings = true; ///< fit log v rather than v
    int refine_steps = 4;     ///< Gauss-Newton steps towards the reading-space fit
    double max_train_rms = 1e-2;
};

namespace detail {

// Legendre P_0..P_deg at 2z - 1
inline void legendre01(double z, int deg, double* p) {
    const double t = 2.0 * z - 1.0;
    p[0] = 1.0;
    if (deg > 0) p[1] = t;
    for (int k = 1; k < deg; ++k) p[k + 1] = ((2 * k + 1) * t * p[k] - k * p[k - 1]) / (k + 1);
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

/// log v(theta, t_k; x) ~ sum_m c_{k,m} P_m1(x1) P_m2(x2) P_m3(theta1) P_m4(theta2)
/// on [0,1]^4, full tensor basis. Fitting the log keeps the relative error
/// uniform across near and far sensors.
class PCESurrogate {
public:
    PCESurrogate() = default;
    PCESurrogate(int degree, std::vector<Vector> coefs, bool log_readings = true)
        : degree_(degree), log_(log_readings), coefs_(std::move(coefs)) {
        const auto q = static_cast<Eigen::Index>(degree_ + 1);
        for (const auto& c : coefs_)
            if (c.size() != q * q * q * q) throw ArgumentError("PCESurrogate: coefficient count mismatch");
    }

    int degree() const { return degree_; }
    int outputs() const { return static_cast<int>(coefs_.size()); }
    bool log_readings() const { return log_; }
    const std::vector<Vector>& coefficients() const { return coefs_; }

    // coefficient (m1, m2, m3, m4) lives at ((m1 q + m2) q + m3) q + m4
    Vector operator()(const Vector& x, const Vector& theta) const {
        const auto& slab = design_slab(theta);
        const int q = degree_ + 1;
        std::array<double, 32> px{}, py{};
        detail::legendre01(x(0), degree_, px.data());
        detail::legendre01(x(1), degree_, py.data());
        Vector y(outputs());
        for (int k = 0; k < outputs(); ++k) {
            double acc = 0.0;
            for (int a = 0; a < q; ++a)
                for (int b = 0; b < q; ++b) acc += px[a] * py[b] * slab[k](a, b);
            y(k) = log_ ? std::exp(acc) : acc;
        }
        return y;
    }

    double train_rms = 0.0;   ///< relative RMS on the training set
    std::string hash;

private:
    // contraction over the design axes, cached per thread for the last theta
    const std::vector<Matrix>& design_slab(const Vector& theta) const {
        struct Slot {
            const PCESurrogate* owner = nullptr;
            double t0 = NAN, t1 = NAN;
            std::vector<Matrix> slab;
        };
        thread_local Slot slot;
        if (slot.owner == this && slot.t0 == theta(0) && slot.t1 == theta(1)) return slot.slab;
        const int q = degree_ + 1;
        std::array<double, 32> p0{}, p1{};
        detail::legendre01(theta(0), degree_, p0.data());
        detail::legendre01(theta(1), degree_, p1.data());
        slot.slab.assign(coefs_.size(), Matrix::Zero(q, q));
        for (std::size_t k = 0; k < coefs_.size(); ++k) {
            const double* c = coefs_[k].data();
            for (int a = 0; a < q; ++a)
                for (int b = 0; b < q; ++b) {
                    double acc = 0.0;
                    for (int m = 0; m < q; ++m)
                        for (int l = 0; l < q; ++l) acc += c[((a * q + b) * q + m) * q + l] * p0[m] * p1[l];
                    slot.slab[k](a, b) = acc;
                }
        }
        slot.owner = this;
        slot.t0 = theta(0);
        slot.t1 = theta(1);
        return slot.slab;
    }

    int degree_ = 0;
    bool log_ = true;
    std::vector<Vector> coefs_;
};

inline std::string pce_hash(const HeatSolverConfig& cfg, const PCEOptions& opt) {
    std::ostringstream os;
    os << "pce-v1;" << (opt.log_readings ? "log" : "lin") << "-tensor;gn=" << opt.refine_steps << ';' << cfg.key() << ";deg=" << opt.degree << ";cc=" << opt.training_points;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(os.str())));
    return buf;
}

/// Cache directory: $WASSOED_CACHE_DIR, else ./wassoed_cache.
inline std::filesystem::path surrogate_cache_dir() {
    if (const char* e = std::getenv("WASSOED_CACHE_DIR"); e && *e) return e;
    return "wassoed_cache";
}

inline void write_pce_csv(std::ostream& os, const PCESurrogate& s) {
    os << "out_idx,t_idx,m1,m2,m3,m4,coef\n";
    const int q = s.degree() + 1;
    char buf[32];
    for (int k = 0; k < s.outputs(); ++k)
        for (int i = 0; i < q * q * q * q; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", s.coefficients()[k](i));
            // one scalar reading per time, so output and time indices coincide
            os << k << ',' << k << ',' << i / (q * q * q) << ',' << (i / (q * q)) % q << ',' << (i / q) % q << ','
               << i % q << ',' << buf << '\n';
        }
}

inline PCESurrogate read_pce_csv(std::istream& is, int degree, int outputs, bool log_readings = true) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(is, line) || line != "out_idx,t_idx,m1,m2,m3,m4,coef")
        throw ParseError("pce csv: unexpected header", 1);
    const int q = degree + 1;
    std::vector<Vector> coefs(outputs, Vector::Zero(q * q * q * q));
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        int k, t, m[4];
        double c;
        if (std::sscanf(line.c_str(), "%d,%d,%d,%d,%d,%d,%lf", &k, &t, &m[0], &m[1], &m[2], &m[3], &c) != 7)
            throw ParseError("pce csv: malformed row", lineno);
        if (k < 0 || k >= outputs || m[0] < 0 || m[0] >= q || m[1] < 0 || m[1] >= q || m[2] < 0 || m[2] >= q ||
            m[3] < 0 || m[3] >= q)
            throw ParseError("pce csv: index out of range", lineno);
        coefs[k](((m[0] * q + m[1]) * q + m[2]) * q + m[3]) = c;
        ++rows;
    }
    if (rows != static_cast<std::size_t>(outputs) * q * q * q * q) throw ParseError("pce csv: wrong row count");
    return {degree, std::move(coefs), log_readings};
}

/// Fit the surrogate on a tensor Clenshaw-Curtis grid over (x, theta). One PDE
/// solve per source node; sensors are read from the same solution. The tensor
/// structure makes least squares separable: C = F x_1 P+ x_2 P+ x_3 P+ x_4 P+.
inline PCESurrogate fit_pce_surrogate(const HeatSolverConfig& cfg, const PCEOptions& opt = {}) {
    if (opt.degree < 0 || opt.degree > 30) throw ArgumentError("fit_pce_surrogate: degree out of range");
    if (opt.training_points < opt.degree + 1) throw ArgumentError("fit_pce_surrogate: too few training points");
    const int n = opt.training_points, q = opt.degree + 1;
    const int outs = static_cast<int>(cfg.obs_times.size());
    const Vector z = clenshaw_curtis(n, 0.0, 1.0).nodes.row(0).transpose();

    Matrix vander(n, q);
    for (int i = 0; i < n; ++i) {
        std::array<double, 32> p{};
        detail::legendre01(z(i), opt.degree, p.data());
        for (int m = 0; m < q; ++m) vander(i, m) = p[m];
    }
    const Matrix pinv = vander.colPivHouseholderQr().solve(Matrix::Identity(n, n));  // q x n

    // data F[k][((i1 n + i2) n + j1) n + j2] = log v_k
    const std::size_t n4 = static_cast<std::size_t>(n) * n * n * n;
    std::vector<std::vector<double>> data(outs, std::vector<double>(n4));
    std::vector<std::vector<double>> raw(outs, std::vector<double>(n4));
    for (int i1 = 0; i1 < n; ++i1)
        for (int i2 = 0; i2 < n; ++i2) {
            Vector x(2);
            x << z(i1), z(i2);
            const auto sol = solve_heat(cfg, x);
            for (int j1 = 0; j1 < n; ++j1)
                for (int j2 = 0; j2 < n; ++j2) {
                    Vector th(2);
                    th << z(j1), z(j2);
                    const Vector y = sol.read(th);
                    const std::size_t idx = ((static_cast<std::size_t>(i1) * n + i2) * n + j1) * n + j2;
                    for (int k = 0; k < outs; ++k) {
                        if (opt.log_readings && !(y(k) > 0.0))
                            throw SurrogateQualityError("fit_pce_surrogate: nonpositive training reading");
                        raw[k][idx] = y(k);
                        data[k][idx] = opt.log_readings ? std::log(y(k)) : y(k);
                    }
                }
        }

    // mode-axis product with a (rows x dims[axis]) matrix
    const auto mode = [](const std::vector<double>& in, std::array<int, 4> dims, int axis, const Matrix& m) {
        std::array<int, 4> od = dims;
        od[axis] = static_cast<int>(m.rows());
        std::vector<double> out(static_cast<std::size_t>(od[0]) * od[1] * od[2] * od[3], 0.0);
        std::array<std::size_t, 4> st{}, ost{};
        st[3] = ost[3] = 1;
        for (int a = 2; a >= 0; --a) {
            st[a] = st[a + 1] * dims[a + 1];
            ost[a] = ost[a + 1] * od[a + 1];
        }
        for (std::size_t o = 0; o < out.size(); ++o) {
            std::array<int, 4> id{};
            std::size_t r = o;
            for (int a = 0; a < 4; ++a) {
                id[a] = static_cast<int>(r / ost[a]);
                r %= ost[a];
            }
            std::size_t base = 0;
            for (int a = 0; a < 4; ++a)
                if (a != axis) base += id[a] * st[a];
            double acc = 0.0;
            for (int i = 0; i < dims[axis]; ++i) acc += m(id[axis], i) * in[base + i * st[axis]];
            out[o] = acc;
        }
        return out;
    };
    const auto all_axes = [&](std::vector<double> t, const Matrix& m) {
        std::array<int, 4> dims{};
        dims.fill(static_cast<int>(m.cols()));
        for (int axis = 0; axis < 4; ++axis) {
            t = mode(t, dims, axis, m);
            dims[axis] = static_cast<int>(m.rows());
        }
        return t;
    };
    const Matrix vt = vander.transpose();
    const Matrix gram_inv = (vt * vander).inverse();
    const auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    };
    const auto reading_error = [&](const std::vector<double>& fit, int k) {
        double num = 0.0;
        for (std::size_t i = 0; i < n4; ++i) {
            const double v = opt.log_readings ? std::exp(fit[i]) : fit[i];
            num += (v - raw[k][i]) * (v - raw[k][i]);
        }
        return num;
    };

    std::vector<Vector> coefs(outs);
    double num = 0.0, den = 0.0;
    for (int k = 0; k < outs; ++k) {
        std::vector<double> c = all_axes(data[k], pinv);
        std::vector<double> fit = all_axes(c, vander);
        double err = reading_error(fit, k);
        // Gauss-Newton in reading space from the log fit: the log residual
        // weights near and far sensors equally, the reading residual does not
        for (int it = 0; opt.log_readings && it < opt.refine_steps; ++it) {
            std::vector<double> vh(n4), w(n4), rhs(n4);
            for (std::size_t i = 0; i < n4; ++i) {
                vh[i] = std::exp(fit[i]);
                w[i] = vh[i] * vh[i];
                rhs[i] = vh[i] * (raw[k][i] - vh[i]);
            }
            const auto normal = [&](const std::vector<double>& d) {
                std::vector<double> t = all_axes(d, vander);
                for (std::size_t i = 0; i < n4; ++i) t[i] *= w[i];
                return all_axes(t, vt);
            };
            // preconditioned CG, preconditioner (P^T P)^{-1} on every axis
            std::vector<double> delta(c.size(), 0.0), r = all_axes(rhs, vt);
            std::vector<double> zr = all_axes(r, gram_inv), dir = zr;
            double rz = dot(r, zr);
            const double r0 = std::sqrt(dot(r, r));
            for (int cg = 0; cg < 200 && std::sqrt(dot(r, r)) > 1e-8 * r0; ++cg) {
                const std::vector<double> ad = normal(dir);
                const double alpha = rz / dot(dir, ad);
                for (std::size_t i = 0; i < c.size(); ++i) {
                    delta[i] += alpha * dir[i];
                    r[i] -= alpha * ad[i];
                }
                zr = all_axes(r, gram_inv);
                const double rz_new = dot(r, zr);
                for (std::size_t i = 0; i < c.size(); ++i) dir[i] = zr[i] + rz_new / rz * dir[i];
                rz = rz_new;
            }
            // damped update
            double step = 1.0;
            for (; step > 1e-3; step *= 0.5) {
                std::vector<double> trial = c;
                for (std::size_t i = 0; i < c.size(); ++i) trial[i] += step * delta[i];
                std::vector<double> tf = all_axes(trial, vander);
                const double te = reading_error(tf, k);
                if (te < err) {
                    c = std::move(trial);
                    fit = std::move(tf);
                    err = te;
                    break;
                }
            }
            if (step <= 1e-3) break;
        }
        num += err;
        for (std::size_t i = 0; i < n4; ++i) den += raw[k][i] * raw[k][i];
        coefs[k] = Eigen::Map<Vector>(c.data(), static_cast<Eigen::Index>(c.size()));
    }
    PCESurrogate s(opt.degree, std::move(coefs), opt.log_readings);
    s.hash = pce_hash(cfg, opt);
    s.train_rms = std::sqrt(num / den);
    if (!(s.train_rms <= opt.max_train_rms))
        throw SurrogateQualityError("fit_pce_surrogate: training residual " + std::to_string(s.train_rms) +
                                    " above threshold");
    return s;
}

/// Load the surrogate from the cache directory, fitting and storing it on a miss.
inline PCESurrogate build_pce_surrogate(const HeatSolverConfig& cfg, const PCEOptions& opt = {},
                                        std::filesystem::path dir = surrogate_cache_dir()) {
    const std::string hash = pce_hash(cfg, opt);
    const auto file = dir / ("pce_" + hash + ".csv");
    const auto meta = dir / ("pce_" + hash + ".txt");
    if (std::filesystem::exists(file)) {
        std::ifstream is(file);
        PCESurrogate s = read_pce_csv(is, opt.degree, static_cast<int>(cfg.obs_times.size()), opt.log_readings);
        s.hash = hash;
        std::ifstream ms(meta);
        std::string key;
        if (ms >> key >> s.train_rms && key == "train_rms") return s;
        s.train_rms = NAN;
        return s;
    }
    PCESurrogate s = fit_pce_surrogate(cfg, opt);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!ec) {
        // write-then-rename so a concurrent reader never sees a partial file
        const auto tmp = dir / ("pce_" + hash + ".csv.tmp");
        {
            std::ofstream os(tmp);
            write_pce_csv(os, s);
        }
        std::filesystem::rename(tmp, file, ec);
        std::ofstream ms(meta);
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", s.train_rms);
        ms << "train_rms " << buf << "\nconfig " << cfg.key() << '\n';
    }
    return s;
}

/// Relative RMS of surrogate vs direct solves at `count` uniform random (x, theta).
inline double surrogate_holdout_rms(const PCESurrogate& s, const HeatSolverConfig& cfg, int count,
                                    std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < count; ++i) {
        Vector x(2), th(2);
        x << u(rng), u(rng);
        th << u(rng), u(rng);
        const Vector ref = heat_forward(cfg, x, th);
        num += (s(x, th) - ref).squaredNorm();
        den += ref.squaredNorm();
    }
    return std::sqrt(num / den);
}

/// Source localisation: x in [0,1]^2 unknown, theta in [0,1]^2 sensor, y in R^K.
inline ForwardModel example2_model(std::shared_ptr<const PCESurrogate> surrogate) {
    if (!surrogate) throw ArgumentError("example2_model: null surrogate");
    ForwardModel f;
    f.name = "example2";
    f.input_dim = 2;
    f.design_dim = 2;
    f.output_dim = surrogate->outputs();
    f.eval = [surrogate](const Vector& x, const Vector& t) -> Vector { return (*surrogate)(x, t); };
    return f;
}

/// Same map through direct PDE solves; slow, for validation.
inline ForwardModel example2_direct_model(const HeatSolverConfig& cfg) {
    cfg.validate();
    ForwardModel f;
    f.name = "example2-direct";
    f.input_dim = 2;
    f.design_dim = 2;
    f.output_dim = static_cast<Eigen::Index>(cfg.obs_times.size());
    f.eval = [cfg](const Vector& x, const Vector& t) -> Vector { return heat_forward(cfg, x, t); };
    return f;
}

inline UniformBoxMeasure example2_prior() { return UniformBoxMeasure::unit_cube(2); }

}  // namespace wassoed
