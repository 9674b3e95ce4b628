#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "wassoed/bayes.hpp"

using namespace wassoed;

namespace {

Matrix random_spd(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> z;
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = z(rng);
    return linalg::symmetrize(a * a.transpose() + 0.5 * Matrix::Identity(n, n));
}

ForwardModel scalar_linear(double g) {
    ForwardModel f;
    f.name = "scalar";
    f.input_dim = f.output_dim = 1;
    f.design_dim = 0;
    f.eval = [g](const Vector& x, const Vector&) -> Vector { return g * x; };
    f.linear_operator = [g](const Vector&) { return Matrix::Constant(1, 1, g); };
    return f;
}

}  // namespace

TEST(Conjugate, ScalarExample) {
    // G = 1, Gamma = 1, prior N(0,1), y = 2 -> N(1, 1/2)
    const LinearGaussianModel m(Matrix::Ones(1, 1), Matrix::Ones(1, 1), GaussianMeasure::scalar(0, 1));
    const auto post = conjugate_posterior(m, Vector::Constant(1, 2.0));
    EXPECT_NEAR(post.mean()(0), 1.0, 1e-14);
    EXPECT_NEAR(post.cov()(0, 0), 0.5, 1e-14);
}

TEST(Conjugate, ZeroOperatorLeavesPrior) {
    std::mt19937_64 rng(3);
    const GaussianMeasure prior(Vector::Constant(3, 0.4), random_spd(rng, 3));
    const LinearGaussianModel m(Matrix::Zero(2, 3), Matrix::Identity(2, 2), prior);
    const auto post = conjugate_posterior(m, Vector::Constant(2, 7.0));
    EXPECT_LT((post.mean() - prior.mean()).norm(), 1e-14);
    EXPECT_LT((post.cov() - prior.cov()).norm(), 1e-12);
}

TEST(Conjugate, AgreesWithInformationForm) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z;
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::Index n = 1 + trial % 4, d = 1 + (trial / 4) % 4;
        Matrix g(d, n);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = 0; j < n; ++j) g(i, j) = z(rng);
        Vector m0(n), y(d);
        for (Eigen::Index i = 0; i < n; ++i) m0(i) = z(rng);
        for (Eigen::Index i = 0; i < d; ++i) y(i) = z(rng);
        const Matrix c0 = random_spd(rng, n), gam = random_spd(rng, d);
        const LinearGaussianModel m(g, gam, GaussianMeasure(m0, c0));
        const auto post = conjugate_posterior(m, y);
        // (C0^{-1} + G^T Gamma^{-1} G)^{-1} and C_post (C0^{-1} m0 + G^T Gamma^{-1} y)
        const Matrix prec = c0.inverse() + g.transpose() * gam.inverse() * g;
        const Matrix cp = prec.inverse();
        const Vector mp = cp * (c0.inverse() * m0 + g.transpose() * gam.inverse() * y);
        EXPECT_LT((post.cov() - cp).norm(), 1e-9 * (1 + cp.norm()));
        EXPECT_LT((post.mean() - mp).norm(), 1e-9 * (1 + mp.norm()));
        // posterior covariance never exceeds the prior (Loewner order)
        Eigen::SelfAdjointEigenSolver<Matrix> es(linalg::symmetrize(c0 - post.cov()));
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    }
}

TEST(Evidence, ScalarLogPdf) {
    const LinearGaussianModel m(Matrix::Ones(1, 1), Matrix::Ones(1, 1), GaussianMeasure::scalar(0, 1));
    // evidence N(0, 2)
    const double y = 0.7;
    const double expect = -0.5 * y * y / 2.0 - 0.5 * std::log(2.0 * M_PI * 2.0);
    EXPECT_NEAR(evidence_logpdf(m, Vector::Constant(1, y)), expect, 1e-14);
}

TEST(NoiseModel, RejectsSingularNoise) {
    EXPECT_THROW(GaussianNoiseModel(scalar_linear(1.0), Matrix::Zero(1, 1)), ArgumentError);
    EXPECT_THROW(GaussianNoiseModel(scalar_linear(1.0), Matrix::Identity(2, 2)), ArgumentError);
}

TEST(Energy, HalfWeightedSquare) {
    const GaussianNoiseModel m(scalar_linear(2.0), Matrix::Constant(1, 1, 0.25));
    // (2*1 - 3)^2 / (2 * 0.25) = 2
    EXPECT_NEAR(likelihood_energy(m, Vector::Ones(1), Vector::Constant(1, 3.0), Vector()), 2.0, 1e-14);
    EXPECT_THROW(likelihood_energy(m, Vector::Ones(1), Vector::Ones(2), Vector()), ArgumentError);
}

TEST(Reweight, ExamplesAndUnderflow) {
    const auto prior = EmpiricalMeasure::uniform_1d({0.0, 1.0});
    Vector phi(2);
    phi << 0.0, std::log(3.0);
    const auto post = reweight(prior, phi);
    EXPECT_NEAR(post.measure.weights()(0), 0.75, 1e-15);
    EXPECT_NEAR(post.measure.weights()(1), 0.25, 1e-15);
    // log Z = log(0.5 + 0.5/3)
    EXPECT_NEAR(post.log_z, std::log(2.0 / 3.0), 1e-14);

    // huge energies that underflow exp() directly stay well defined
    phi << 2000.0, 2001.0;
    const auto far = reweight(prior, phi);
    EXPECT_NEAR(far.measure.weights()(0), 1.0 / (1.0 + std::exp(-1.0)), 1e-14);
    EXPECT_NEAR(far.log_z, std::log(0.5) - 2000.0 + std::log1p(std::exp(-1.0)), 1e-10);

    phi << std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity();
    EXPECT_THROW(reweight(prior, phi), DegenerateEvidenceError);
    phi << 0.0, std::nan("");
    EXPECT_THROW(reweight(prior, phi), NumericError);
}

TEST(Reweight, ZeroEnergyKeepsPrior) {
    const auto prior = sample(GaussianMeasure::scalar(0, 1), 40, 9);
    const auto post = reweight(prior, Vector::Zero(40));
    EXPECT_LT((post.measure.weights() - prior.weights()).cwiseAbs().maxCoeff(), 1e-16);
    EXPECT_NEAR(post.log_z, 0.0, 1e-15);
}

TEST(EmpiricalPosterior, ConvergesToConjugatePosterior) {
    const GaussianNoiseModel model(scalar_linear(1.0), Matrix::Ones(1, 1));
    const auto prior = sample(GaussianMeasure::scalar(0, 1), 200000, 21);
    const auto post = empirical_posterior(prior, model, Vector::Constant(1, 2.0), Vector());
    const double mean = post.measure.atoms().row(0).dot(post.measure.weights());
    const double var = (post.measure.atoms().row(0).array() - mean).square().matrix().dot(post.measure.weights());
    EXPECT_NEAR(mean, 1.0, 0.01);
    EXPECT_NEAR(var, 0.5, 0.01);
    // log Z_M -> log of the evidence density times sqrt(2 pi Gamma)
    EXPECT_NEAR(post.log_z, -0.5 * 4.0 / 2.0 - 0.5 * std::log(2.0), 0.01);
}

TEST(SampleJoint, ShapesAndDeterminism) {
    const GaussianNoiseModel model(scalar_linear(5.0), Matrix::Constant(1, 1, 0.0025));
    const auto [x1, y1] = sample_joint(GaussianMeasure::scalar(0, 1), model, Vector(), 1000, 5);
    const auto [x2, y2] = sample_joint(GaussianMeasure::scalar(0, 1), model, Vector(), 1000, 5);
    EXPECT_EQ(x1.cols(), 1000);
    EXPECT_EQ(y1.cols(), 1000);
    EXPECT_EQ((y1 - y2).norm(), 0.0);
    const double resid = (y1 - 5.0 * x1).array().square().mean();
    EXPECT_NEAR(resid, 0.0025, 0.0005);
}
