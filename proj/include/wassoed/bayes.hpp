#pragma once

// Likelihoods, conjugate Gaussian updates and importance-weighted empirical posteriors.

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <utility>

#include "wassoed/error.hpp"
#include "wassoed/forward_model.hpp"
#include "wassoed/linalg.hpp"
#include "wassoed/measures.hpp"
#include "wassoed/random.hpp"

namespace wassoed {

/// y = G(x; theta) + eps, eps ~ N(0, noise_cov). The Cholesky factor of the
/// noise covariance is computed once at construction.
class GaussianNoiseModel {
public:
    GaussianNoiseModel(ForwardModel forward, Matrix noise_cov)
        : forward_(std::move(forward)), noise_cov_(std::move(noise_cov)) {
        if (noise_cov_.rows() != forward_.output_dim)
            throw ArgumentError("GaussianNoiseModel: noise covariance does not match output dimension");
        linalg::require_psd(noise_cov_, "noise covariance");
        noise_cov_ = linalg::symmetrize(noise_cov_);
        Eigen::LLT<Matrix> llt(noise_cov_);
        if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 0.0)
            throw ArgumentError("GaussianNoiseModel: noise covariance must be invertible");
        chol_ = llt.matrixL();
        log_det_ = 2.0 * chol_.diagonal().array().log().sum();
    }

    const ForwardModel& forward() const { return forward_; }
    const Matrix& noise_cov() const { return noise_cov_; }
    /// Lower Cholesky factor L of the noise covariance.
    const Matrix& noise_chol() const { return chol_; }
    double noise_log_det() const { return log_det_; }
    Eigen::Index output_dim() const { return forward_.output_dim; }

    /// 1/2 ||r||_Gamma^2 = 1/2 ||L^{-1} r||^2
    double half_norm2(const Vector& r) const {
        return 0.5 * chol_.triangularView<Eigen::Lower>().solve(r).squaredNorm();
    }

private:
    ForwardModel forward_;
    Matrix noise_cov_;
    Matrix chol_;
    double log_det_ = 0.0;
};

/// G: d x n, Gamma: d x d, prior on R^n.
class LinearGaussianModel {
public:
    LinearGaussianModel(Matrix G, Matrix noise_cov, GaussianMeasure prior)
        : G_(std::move(G)), noise_cov_(std::move(noise_cov)), prior_(std::move(prior)) {
        if (G_.cols() != prior_.dim()) throw ArgumentError("LinearGaussianModel: G columns must match prior dimension");
        if (noise_cov_.rows() != G_.rows() || noise_cov_.cols() != G_.rows())
            throw ArgumentError("LinearGaussianModel: noise covariance must be d x d");
        linalg::require_psd(noise_cov_, "noise covariance");
        noise_cov_ = linalg::symmetrize(noise_cov_);
        Eigen::LLT<Matrix> llt(noise_cov_);
        if (llt.info() != Eigen::Success) throw ArgumentError("LinearGaussianModel: noise covariance must be invertible");
    }

    const Matrix& G() const { return G_; }
    const Matrix& noise_cov() const { return noise_cov_; }
    const GaussianMeasure& prior() const { return prior_; }
    Eigen::Index input_dim() const { return G_.cols(); }
    Eigen::Index output_dim() const { return G_.rows(); }

    /// Same problem as a forward model + noise model pair (design argument ignored).
    GaussianNoiseModel as_noise_model() const {
        ForwardModel f;
        f.name = "linear";
        f.input_dim = input_dim();
        f.output_dim = output_dim();
        f.design_dim = 0;
        const Matrix g = G_;
        f.eval = [g](const Vector& x, const Vector&) -> Vector { return g * x; };
        f.linear_operator = [g](const Vector&) { return g; };
        return {std::move(f), noise_cov_};
    }

private:
    Matrix G_;
    Matrix noise_cov_;
    GaussianMeasure prior_;
};

/// Phi(x, y) = 1/2 ||G(x; theta) - y||_Gamma^2.
inline double likelihood_energy(const GaussianNoiseModel& model, const Vector& x, const Vector& y,
                                const Vector& theta) {
    if (y.size() != model.output_dim()) throw ArgumentError("likelihood_energy: observation has wrong dimension");
    const Vector gx = model.forward()(x, theta);
    const double phi = model.half_norm2(gx - y);
    if (!std::isfinite(phi)) throw NumericError("likelihood_energy: non-finite energy");
    return phi;
}

/// Posterior covariance C0 - (C0 G^T) S^{-1} (G C0), S = Gamma + G C0 G^T, symmetrized.
inline Matrix posterior_covariance(const LinearGaussianModel& model) {
    const Matrix& c0 = model.prior().cov();
    const Matrix gc0 = model.G() * c0;
    const Matrix s = linalg::symmetrize(model.noise_cov() + gc0 * model.G().transpose());
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success) throw NumericError("posterior_covariance: S is not positive definite");
    return linalg::symmetrize(c0 - gc0.transpose() * llt.solve(gc0));
}

/// N(x_post(y), C_post) with x_post = m0 + C_post G^T Gamma^{-1} (y - G m0).
inline GaussianMeasure conjugate_posterior(const LinearGaussianModel& model, const Vector& y) {
    if (y.size() != model.output_dim()) throw ArgumentError("conjugate_posterior: observation has wrong dimension");
    const Matrix cpost = posterior_covariance(model);
    // gain = C0 G^T S^{-1}; equivalent to C_post G^T Gamma^{-1} and better conditioned
    const Matrix& c0 = model.prior().cov();
    const Matrix gc0 = model.G() * c0;
    const Matrix s = linalg::symmetrize(model.noise_cov() + gc0 * model.G().transpose());
    Eigen::LLT<Matrix> llt(s);
    const Vector innov = y - model.G() * model.prior().mean();
    const Vector mean = model.prior().mean() + gc0.transpose() * llt.solve(innov);
    // tiny negative eigenvalues from cancellation are clipped
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cpost);
    Vector lam = eig.eigenvalues().cwiseMax(0.0);
    return {mean, linalg::symmetrize(eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose())};
}

/// Log density of y under the evidence N(G m0, Gamma + G C0 G^T).
inline double evidence_logpdf(const LinearGaussianModel& model, const Vector& y) {
    const Matrix gc0 = model.G() * model.prior().cov();
    const GaussianMeasure ev(model.G() * model.prior().mean(),
                             linalg::symmetrize(model.noise_cov() + gc0 * model.G().transpose()));
    return ev.log_density(y);
}

struct EmpiricalPosterior {
    EmpiricalMeasure measure;
    double log_z = 0.0;  ///< log Z_M(y) = log sum_m w_m exp(-Phi(x^m, y))
};

/// Reweights atoms by exp(-phi) (log-sum-exp). `phi(m)` is the energy at atom m.
inline EmpiricalPosterior reweight(const EmpiricalMeasure& prior, const Vector& phi) {
    if (phi.size() != prior.size()) throw ArgumentError("reweight: one energy per atom required");
    Vector logw(prior.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index m = 0; m < prior.size(); ++m) {
        const double w = prior.weights()(m);
        logw(m) = w > 0.0 ? std::log(w) - phi(m) : -std::numeric_limits<double>::infinity();
        if (std::isnan(logw(m))) throw NumericError("reweight: NaN energy at atom " + std::to_string(m));
        mx = std::max(mx, logw(m));
    }
    if (!std::isfinite(mx)) throw DegenerateEvidenceError("reweight: all posterior weights vanished");
    Vector w = (logw.array() - mx).exp();
    const double s = w.sum();
    if (!(s > 0.0)) throw DegenerateEvidenceError("reweight: all posterior weights vanished");
    w /= s;
    // renormalize once more so the sum is 1 to rounding
    w /= w.sum();
    return {EmpiricalMeasure(prior.atoms(), std::move(w)), mx + std::log(s)};
}

/// Posterior weights w_m proportional to prior_m exp(-Phi(x^m, y)).
inline EmpiricalPosterior empirical_posterior(const EmpiricalMeasure& prior, const GaussianNoiseModel& model,
                                              const Vector& y, const Vector& theta) {
    Vector phi(prior.size());
    for (Eigen::Index m = 0; m < prior.size(); ++m)
        phi(m) = likelihood_energy(model, prior.atoms().col(m), y, theta);
    return reweight(prior, phi);
}

/// Joint draws x ~ prior, y ~ N(G(x; theta), Gamma). Returns (x atoms, y columns).
inline std::pair<Matrix, Matrix> sample_joint(const Measure& prior, const GaussianNoiseModel& model,
                                              const Vector& theta, int count, std::uint64_t seed) {
    const EmpiricalMeasure xs = sample(prior, count, derive_seed(seed, {1}));
    Rng rng(derive_seed(seed, {2}));
    std::normal_distribution<double> z;
    Matrix ys(model.output_dim(), count);
    Vector e(model.output_dim());
    for (int i = 0; i < count; ++i) {
        for (Eigen::Index k = 0; k < e.size(); ++k) e(k) = z(rng);
        ys.col(i) = model.forward()(xs.atoms().col(i), theta) + model.noise_chol() * e;
    }
    return {xs.atoms(), std::move(ys)};
}

}  // namespace wassoed
