#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "wassoed/error.hpp"

namespace wassoed {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

namespace linalg {

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Relative Frobenius asymmetry ||A - A^T|| / ||A||.
inline double asymmetry(const Matrix& a) {
    const double norm = a.norm();
    if (norm == 0.0) return 0.0;
    return (a - a.transpose()).norm() / norm;
}

/// Throws unless `a` is square, symmetric within `sym_tol` and has
/// eigenvalues >= -psd_tol * ||a||.
inline void require_psd(const Matrix& a, const std::string& what, double sym_tol = 1e-12,
                        double psd_tol = 1e-12) {
    if (a.rows() != a.cols()) throw ArgumentError(what + ": matrix is not square");
    if (!a.allFinite()) throw ArgumentError(what + ": matrix has non-finite entries");
    if (asymmetry(a) > sym_tol) throw ArgumentError(what + ": matrix is not symmetric");
    if (a.rows() == 0) return;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a), Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -psd_tol * std::max(a.norm(), 1e-300))
        throw ArgumentError(what + ": matrix is not positive semidefinite");
}

/// Square root of a symmetric PSD matrix. Eigenvalues in [-clamp_tol*||a||, 0)
/// are treated as rounding noise and set to zero; anything more negative throws.
inline Matrix sqrtm_psd(const Matrix& a, double clamp_tol = 1e-10) {
    if (a.rows() == 0) return a;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a));
    if (eig.info() != Eigen::Success) throw NumericError("sqrtm_psd: eigensolver failed");
    Vector lam = eig.eigenvalues();
    const double floor = -clamp_tol * std::max(a.norm(), 1e-300);
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam(i) < floor) throw ArgumentError("sqrtm_psd: matrix is indefinite");
        lam(i) = std::sqrt(std::max(lam(i), 0.0));
    }
    return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

/// Trace of the square root of a symmetric PSD matrix.
inline double trace_sqrtm_psd(const Matrix& a, double clamp_tol = 1e-10) {
    if (a.rows() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a), Eigen::EigenvaluesOnly);
    const double floor = -clamp_tol * std::max(a.norm(), 1e-300);
    double tr = 0.0;
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        const double l = eig.eigenvalues()(i);
        if (l < floor) throw ArgumentError("trace_sqrtm_psd: matrix is indefinite");
        tr += std::sqrt(std::max(l, 0.0));
    }
    return tr;
}

/// Lower Cholesky factor. On failure retries once with jitter
/// 1e-12 * trace / n on the diagonal, then throws NumericError.
inline Matrix cholesky_with_jitter(const Matrix& a) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    const double n = static_cast<double>(a.rows());
    Matrix jittered = a;
    jittered.diagonal().array() += 1e-12 * a.trace() / n;
    llt.compute(jittered);
    if (llt.info() != Eigen::Success)
        throw NumericError("Cholesky factorization failed (matrix not positive definite)");
    return llt.matrixL();
}

/// log det of a symmetric positive definite matrix; -inf if singular.
inline double logdet_spd(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(a), Eigen::EigenvaluesOnly);
    double s = 0.0;
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        const double l = eig.eigenvalues()(i);
        if (l <= 0.0) return -HUGE_VAL;
        s += std::log(l);
    }
    return s;
}

}  // namespace linalg
}  // namespace wassoed
