#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "wassoed/transport.hpp"

using namespace wassoed;

namespace {

Vector v2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

// worst sup-norm map error on an interior probe grid (10%..90% of the box)
template <class F>
double probe_error(const MongeAmperePotential& pot, const BoxDensity& src, F&& exact) {
    double err = 0.0;
    for (int i = 0; i <= 16; ++i)
        for (int j = 0; j <= 16; ++j) {
            const Vector x = src.lower + src.width().cwiseProduct(v2(0.1 + 0.05 * i, 0.1 + 0.05 * j));
            err = std::max(err, (pot.map(x) - exact(x)).cwiseAbs().maxCoeff());
        }
    return err;
}

}  // namespace

TEST(Map1D, GaussianAffineForm) {
    const auto map = transport_map_1d(GaussianMeasure::scalar(0, 1), GaussianMeasure::scalar(1, 4));
    ASSERT_TRUE(map.affine.has_value());
    EXPECT_NEAR(map(0.0), 1.0, 1e-15);
    EXPECT_NEAR(map(1.5), 4.0, 1e-15);
    // the generic quantile-of-CDF composition agrees with the affine form
    TransportMap1D generic = map;
    generic.affine.reset();
    for (double x = -4.0; x <= 4.0; x += 0.25) EXPECT_NEAR(generic(x), map(x), 1e-7);
}

TEST(Map1D, UniformToUniformIsAffine) {
    const auto map = transport_map_1d(UniformBoxMeasure::interval(0, 1), UniformBoxMeasure::interval(2, 5));
    for (double x = 0.0; x <= 1.0; x += 0.125) EXPECT_NEAR(map(x), 2.0 + 3.0 * x, 1e-12);
}

TEST(Map1D, MonotoneAndPushesForward) {
    const GaussianMeasure src = GaussianMeasure::scalar(0.3, 0.5);
    const UniformBoxMeasure tgt = UniformBoxMeasure::interval(-1, 2);
    const auto map = transport_map_1d(src, tgt);
    double prev = -HUGE_VAL;
    for (double x = -3.0; x <= 3.0; x += 0.01) {
        const double t = map(x);
        EXPECT_GE(t, prev);
        prev = t;
    }
    // KS distance of T(samples) to the target
    const auto e = sample(src, 20000, 8);
    std::vector<double> t;
    for (Eigen::Index i = 0; i < e.size(); ++i) t.push_back(map(e.atoms()(0, i)));
    std::sort(t.begin(), t.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double f = cdf_1d(tgt, t[i]);
        ks = std::max({ks, std::abs(f - static_cast<double>(i) / t.size()), std::abs(f - (i + 1.0) / t.size())});
    }
    EXPECT_LT(ks, 1.63 / std::sqrt(20000.0));  // 1% KS critical value
}

TEST(Map1D, EmpiricalSourceRejected) {
    EXPECT_THROW(transport_map_1d(EmpiricalMeasure::uniform_1d({0.0, 1.0}), GaussianMeasure::scalar(0, 1)),
                 UnsupportedDimensionError);
    EXPECT_THROW(transport_map_1d(GaussianMeasure::standard(2), GaussianMeasure::standard(2)),
                 UnsupportedDimensionError);
}

TEST(TransportCost1D, MatchesGaussianW2) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> m(-2, 2), s(0.2, 3);
    const auto gh = gauss_hermite(33);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = GaussianMeasure::scalar(m(rng), std::pow(s(rng), 2));
        const auto b = GaussianMeasure::scalar(m(rng), std::pow(s(rng), 2));
        const double c = transport_cost(transport_map_1d(a, b), a, gh);
        const double w = std::pow(a.mean()(0) - b.mean()(0), 2) + std::pow(a.stddev() - b.stddev(), 2);
        EXPECT_NEAR(c, w, 1e-6 * (1 + w));
    }
}

TEST(TransportCost1D, IdentityAndUniformSource) {
    const auto g = GaussianMeasure::scalar(0, 1);
    EXPECT_NEAR(transport_cost(transport_map_1d(g, g), g, gauss_hermite(20)), 0.0, 1e-15);
    // U[0,1] -> U[0,2]: T(x) = 2x, cost int x^2 = 1/3
    const auto u = UniformBoxMeasure::interval(0, 1);
    const double c = transport_cost(transport_map_1d(u, UniformBoxMeasure::interval(0, 2)), u,
                                    gauss_legendre(10, 0.0, 1.0));
    EXPECT_NEAR(c, 1.0 / 3.0, 1e-12);
}

TEST(MongeAmpere, IdentityOnUnitSquare) {
    const auto box = BoxDensity::uniform(Vector::Zero(2), Vector::Ones(2));
    const auto pot = solve_monge_ampere(box, box);
    EXPECT_LT(probe_error(pot, box, [](const Vector& x) { return x; }), 1e-8);
    EXPECT_LT(pot.report().mean_value, 1e-6);
    EXPECT_GT(pot.report().min_hessian_eig, 0.0);
}

TEST(MongeAmpere, AxisAlignedGaussians) {
    const Vector m1 = v2(0.2, -0.1), m2 = v2(1.0, 0.5), s1 = v2(1.0, 0.7), s2 = v2(0.6, 1.3);
    const GaussianMeasure g1(m1, Matrix(s1.array().square().matrix().asDiagonal()));
    const GaussianMeasure g2(m2, Matrix(s2.array().square().matrix().asDiagonal()));
    const auto b1 = BoxDensity::gaussian(g1, m1 - 5.5 * s1, m1 + 5.5 * s1);
    const auto b2 = BoxDensity::gaussian(g2, m2 - 5.5 * s2, m2 + 5.5 * s2);
    const auto pot = solve_monge_ampere(b1, b2);
    const auto exact = [&](const Vector& x) -> Vector { return m2 + s2.cwiseQuotient(s1).cwiseProduct(x - m1); };
    EXPECT_LT(probe_error(pot, b1, exact), 5e-3);
    EXPECT_LT(pot.report().interior_rms_rel, 1e-4);
    EXPECT_GE(pot.report().min_boundary_hessian_eig, -1e-8);
    // transport cost against the Gaussian closed form (truncation is below 1e-6 in mass)
    const auto rule = tensor_product({gauss_legendre(48, b1.lower(0), b1.upper(0)),
                                      gauss_legendre(48, b1.lower(1), b1.upper(1))});
    const double w2 = (m1 - m2).squaredNorm() + (s1 - s2).squaredNorm();
    EXPECT_NEAR(transport_cost(pot, b1, rule), w2, 1e-3 * w2);
}

TEST(MongeAmpere, SeparableNonuniformTarget) {
    const Vector lo = Vector::Zero(2), hi = Vector::Ones(2);
    const double a = 0.8, b = -0.5;
    const BoxDensity tgt{lo, hi,
                         [=](const Vector& y) { return std::log(1 + a * (y(0) - 0.5)) + std::log(1 + b * (y(1) - 0.5)); },
                         {}};
    // per-axis CDF F(y) = y + c/2 (y^2 - y), inverted in closed form
    const auto inv = [](double c, double u) {
        const double qa = c / 2, qb = 1 - c / 2;
        return (-qb + std::sqrt(qb * qb + 4 * qa * u)) / (2 * qa);
    };
    const auto src = BoxDensity::uniform(lo, hi);
    const auto pot = solve_monge_ampere(src, tgt);
    EXPECT_LT(probe_error(pot, src, [&](const Vector& x) { return v2(inv(a, x(0)), inv(b, x(1))); }), 5e-3);
    EXPECT_GT(pot.report().min_hessian_eig, 0.0);
}

TEST(MongeAmpere, IterationBudgetExhaustedThrows) {
    const auto src = BoxDensity::uniform(Vector::Zero(2), Vector::Ones(2));
    const BoxDensity tgt{Vector::Zero(2), Vector::Ones(2), [](const Vector& y) { return 3.0 * y(0) - 2.0 * y(1); }, {}};
    MongeAmpereOptions opt;
    opt.max_iterations = 1;
    try {
        solve_monge_ampere(src, tgt, opt);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_FALSE(e.residual_history().empty());
    }
}

TEST(MongeAmpere, OptionValidation) {
    const auto box = BoxDensity::uniform(Vector::Zero(2), Vector::Ones(2));
    MongeAmpereOptions opt;
    opt.interior_count = 150;  // not a perfect square
    EXPECT_THROW(solve_monge_ampere(box, box, opt), ArgumentError);
    opt = {};
    opt.boundary_count = 50;  // not a multiple of 4
    EXPECT_THROW(solve_monge_ampere(box, box, opt), ArgumentError);
}

TEST(MongeAmpere, PotentialCsvLayout) {
    const auto box = BoxDensity::uniform(Vector::Zero(2), Vector::Ones(2));
    MongeAmpereOptions opt;
    opt.interior_count = 16;
    opt.boundary_count = 16;
    const auto pot = solve_monge_ampere(box, box, opt);
    std::stringstream ss;
    write_potential_csv(ss, pot);
    std::string line;
    std::getline(ss, line);
    EXPECT_EQ(line, "kind,index,x1,x2,coef");
    int rows = 0;
    while (std::getline(ss, line)) ++rows;
    EXPECT_EQ(rows, 16 + 16 + 6);
}
