#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "wassoed/measures.hpp"

using namespace wassoed;

TEST(Sample, SingularCovarianceIsRejected) {
    const GaussianMeasure degenerate = GaussianMeasure::scalar(0.0, 0.0);
    EXPECT_THROW(sample(degenerate, 3, 1), ArgumentError);
    // a tiny but positive variance factorizes fine
    EXPECT_NO_THROW(sample(GaussianMeasure::scalar(0.0, 1e-30), 3, 1));
}

TEST(Sample, NonPositiveCount) {
    EXPECT_THROW(sample(GaussianMeasure::scalar(0, 1), 0, 1), ArgumentError);
    EXPECT_THROW(sample(UniformBoxMeasure::interval(0, 1), -2, 1), ArgumentError);
}

TEST(Sample, DeterministicGivenSeed) {
    const auto g = GaussianMeasure::scalar(0.0, 1.0);
    const auto a = sample(g, 3, 7);
    const auto b = sample(g, 3, 7);
    ASSERT_EQ(a.size(), 3);
    for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(a.atoms()(0, i), b.atoms()(0, i));
    const auto c = sample(g, 3, 8);
    EXPECT_NE(a.atoms()(0, 0), c.atoms()(0, 0));
}

TEST(Sample, LawOfLargeNumbers) {
    const auto e = sample(GaussianMeasure::scalar(0.0, 1.0), 100000, 12345);
    const double mean = e.atoms().row(0).mean();
    const double var = (e.atoms().row(0).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Sample, MultivariateCovariance) {
    Matrix c(2, 2);
    c << 2.0, 0.6, 0.6, 1.0;
    const auto e = sample(GaussianMeasure(Vector::Zero(2), c), 200000, 3);
    const Matrix centered = e.atoms().colwise() - e.atoms().rowwise().mean();
    const Matrix emp = centered * centered.transpose() / static_cast<double>(e.size());
    EXPECT_LT((emp - c).cwiseAbs().maxCoeff(), 0.03);
}

TEST(Moment, Examples) {
    EXPECT_NEAR(moment_p(GaussianMeasure::scalar(0, 1), 2.0), 1.0, 1e-15);
    EXPECT_NEAR(moment_p(EmpiricalMeasure::uniform_1d({0.0, 2.0}), 1.0), 1.0, 1e-15);
    EXPECT_THROW(moment_p(GaussianMeasure::scalar(0, 1), 0.5), ArgumentError);
}

TEST(Moment, HalfNormalMeanAgainstMonteCarlo) {
    const double exact = std::sqrt(2.0 / std::numbers::pi);
    EXPECT_NEAR(moment_p(GaussianMeasure::scalar(0, 1), 1.0), 0.79788, 1e-5);
    EXPECT_NEAR(moment_p(GaussianMeasure::scalar(0, 1), 1.0), exact, 1e-14);
    // 10^6-sample estimate; std of |Z| is sqrt(1 - 2/pi) ~ 0.6, so 4 sigma ~ 2.4e-3
    const auto e = sample(GaussianMeasure::scalar(0, 1), 1000000, 99);
    EXPECT_NEAR(moment_p(e, 1.0), exact, 2.4e-3);
}

TEST(Moment, GeneralPClosedForms) {
    // E|Z|^3 = 2 sqrt(2/pi); E|Z|^4 = 3
    EXPECT_NEAR(moment_p(GaussianMeasure::scalar(0, 1), 3.0), 2.0 * std::sqrt(2.0 / std::numbers::pi), 1e-10);
    EXPECT_NEAR(moment_p(GaussianMeasure::scalar(0, 1), 4.0), 3.0, 1e-10);
    // uniform [0,1]: E x^p = 1 / (p + 1); [-1, 1]: E|x| = 1/2
    EXPECT_NEAR(moment_p(UniformBoxMeasure::interval(0, 1), 2.5), 1.0 / 3.5, 1e-14);
    EXPECT_NEAR(moment_p(UniformBoxMeasure::interval(-1, 1), 1.0), 0.5, 1e-14);
    // 2D standard normal: E||x|| = sqrt(pi/2), Rayleigh mean
    EXPECT_NEAR(moment_p(GaussianMeasure::standard(2), 1.0), std::sqrt(std::numbers::pi / 2.0), 1e-3);
    EXPECT_NEAR(moment_p(UniformBoxMeasure::unit_cube(2), 2.0), 2.0 / 3.0, 1e-14);
}

TEST(Moment, LyapunovInequalityOnRandomInstances) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-2.0, 2.0), s(0.1, 3.0), pd(1.0, 4.0);
    for (int trial = 0; trial < 100; ++trial) {
        double p = pd(rng), q = pd(rng);
        if (p > q) std::swap(p, q);
        const auto g = GaussianMeasure::scalar(u(rng), s(rng));
        EXPECT_LE(std::pow(moment_p(g, p), 1.0 / p), std::pow(moment_p(g, q), 1.0 / q) * (1 + 1e-9));
        const auto e = sample(g, 50, static_cast<std::uint64_t>(trial));
        EXPECT_LE(std::pow(moment_p(e, p), 1.0 / p), std::pow(moment_p(e, q), 1.0 / q) * (1 + 1e-12));
        const double a = u(rng);
        const auto box = UniformBoxMeasure::interval(a, a + s(rng));
        EXPECT_LE(std::pow(moment_p(box, p), 1.0 / p), std::pow(moment_p(box, q), 1.0 / q) * (1 + 1e-12));
    }
}

TEST(Cdf, Examples) {
    EXPECT_DOUBLE_EQ(cdf_1d(GaussianMeasure::scalar(0, 1), 0.0), 0.5);
    const auto e = EmpiricalMeasure::uniform_1d({1.0, 3.0});
    EXPECT_EQ(quantile_1d(e, 0.25), 1.0);
    EXPECT_EQ(quantile_1d(e, 0.5), 1.0);
    EXPECT_EQ(quantile_1d(e, 0.75), 3.0);
    EXPECT_EQ(cdf_1d(e, 0.999), 0.0);
    EXPECT_EQ(cdf_1d(e, 1.0), 0.5);  // right-continuous
    EXPECT_EQ(cdf_1d(e, 3.0), 1.0);
}

TEST(Cdf, NormalQuantileAgainstBisection) {
    const auto g = GaussianMeasure::scalar(0, 1);
    EXPECT_NEAR(quantile_1d(g, 0.975), 1.959964, 1e-6);
    for (double u : {1e-10, 1e-4, 0.01, 0.3, 0.5, 0.77, 0.975, 0.9999, 1 - 1e-10}) {
        double lo = -20, hi = 20;
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + hi);
            (cdf_1d(g, mid) < u ? lo : hi) = mid;
        }
        // far tails are ill-conditioned: an ulp in u moves x by ulp / pdf(x)
        const double x = 0.5 * (lo + hi);
        const double tol = 1e-9 + 1e-15 / special::normal_pdf(x);
        EXPECT_NEAR(quantile_1d(g, u), x, tol) << "u=" << u;
    }
}

TEST(Cdf, QuantileInvertsCdfOnGaussian) {
    const auto g = GaussianMeasure::scalar(0.3, 2.25);
    for (double x = -5.0; x <= 5.0; x += 0.01) EXPECT_NEAR(quantile_1d(g, cdf_1d(g, x)), x, 1e-8);
}

TEST(Cdf, GeneralizedInverseProperty) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto e = sample(GaussianMeasure::scalar(0, 1), 37, 4);
    const SortedAtoms1D sorted(e);
    for (int i = 0; i < 1000; ++i) {
        const double u = unif(rng);
        if (u <= 0.0) continue;
        EXPECT_GE(cdf_1d(e, quantile_1d(e, u)) + 1e-12, u);
        EXPECT_EQ(sorted.quantile(u), quantile_1d(e, u));
    }
}

TEST(Cdf, ErrorPaths) {
    EXPECT_THROW(cdf_1d(GaussianMeasure::standard(2), 0.0), UnsupportedDimensionError);
    EXPECT_THROW(quantile_1d(GaussianMeasure::scalar(0, 1), 0.0), ArgumentError);
    EXPECT_THROW(quantile_1d(GaussianMeasure::scalar(0, 1), 1.0), ArgumentError);
    EXPECT_THROW(quantile_1d(UniformBoxMeasure::interval(0, 1), 1.5), ArgumentError);
}

TEST(Invariants, ConstructorsValidate) {
    Matrix asym(2, 2);
    asym << 1.0, 0.5, 0.0, 1.0;
    EXPECT_THROW(GaussianMeasure(Vector::Zero(2), asym), ArgumentError);
    Matrix indefinite(2, 2);
    indefinite << 1.0, 0.0, 0.0, -1.0;
    EXPECT_THROW(GaussianMeasure(Vector::Zero(2), indefinite), ArgumentError);
    EXPECT_THROW(GaussianMeasure(Vector::Zero(3), Matrix::Identity(2, 2)), ArgumentError);
    EXPECT_THROW(EmpiricalMeasure::weighted_1d({0, 1}, {0.5, 0.6}), ArgumentError);
    EXPECT_THROW(EmpiricalMeasure::weighted_1d({0, 1}, {1.5, -0.5}), ArgumentError);
    EXPECT_THROW(UniformBoxMeasure::interval(1, 1), ArgumentError);
}

TEST(Csv, RoundTripAndErrors) {
    const auto e = sample(GaussianMeasure::standard(2), 5, 3);
    std::stringstream ss;
    write_empirical_csv(ss, e);
    const auto back = read_empirical_csv(ss);
    EXPECT_EQ(back.size(), 5);
    EXPECT_LT((back.atoms() - e.atoms()).cwiseAbs().maxCoeff(), 1e-15);

    std::stringstream bad("w,x1\n0.5,1\n0.5,abc\n");
    try {
        read_empirical_csv(bad);
        FAIL() << "expected ParseError";
    } catch (const ParseError& err) {
        EXPECT_EQ(err.line(), 3u);
    }
    std::stringstream bad_header("weight,x1\n1,0\n");
    EXPECT_THROW(read_empirical_csv(bad_header), ParseError);
    std::stringstream bad_sum("w,x1\n0.5,1\n0.2,2\n");
    EXPECT_THROW(read_empirical_csv(bad_sum), ParseError);
}
