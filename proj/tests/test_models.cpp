#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "wassoed/models.hpp"
#include "wassoed/utilities.hpp"

using namespace wassoed;

namespace {

Vector v2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

// the full-size surrogate, shared through the on-disk cache
const PCESurrogate& default_surrogate() {
    static const PCESurrogate s = build_pce_surrogate(HeatSolverConfig{});
    return s;
}

}  // namespace

TEST(Linear1D, PlugIn) {
    const auto f = linear_1d_model();
    EXPECT_DOUBLE_EQ(f(Vector::Ones(1), Vector::Ones(1))(0), 5.0);
    EXPECT_EQ(f(Vector::Constant(1, 3.7), Vector::Zero(1))(0), 0.0);
    EXPECT_DOUBLE_EQ(f(Vector::Constant(1, 2.0), Vector::Constant(1, -1.0))(0), 10.0);
    EXPECT_DOUBLE_EQ(f.linear_operator(Vector::Constant(1, 0.5))(0, 0), 5.0 / 64.0);
    EXPECT_DOUBLE_EQ(linear_1d_noise_model().noise_cov()(0, 0), 0.0025);
}

TEST(Example1, PlugInAndSwap) {
    const auto f = example1_model();
    const Vector y = f(Vector::Ones(1), v2(0.2, 0.2));
    EXPECT_NEAR(y(0), 1.04, 1e-15);
    EXPECT_NEAR(y(1), 1.04, 1e-15);
    EXPECT_EQ(f(Vector::Zero(1), v2(0.7, 0.1)).norm(), 0.0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u;
    for (int i = 0; i < 100; ++i) {
        const Vector x = Vector::Constant(1, u(rng));
        const double a = u(rng), b = u(rng);
        const Vector p = f(x, v2(a, b)), q = f(x, v2(b, a));
        EXPECT_EQ(p(0), q(1));
        EXPECT_EQ(p(1), q(0));
        EXPECT_EQ((f(x, v2(a, b)) - p).norm(), 0.0);  // pure
    }
}

TEST(Example1, NestedU2AgainstMonteCarlo) {
    const auto m = example1_noise_model();
    const Measure prior = example1_prior();
    NestedOptions opt;
    opt.prior_nodes = prior_rule(prior, 17);
    const double nested = u2_nested(prior, m, v2(0.2, 0.2), InnerMethod::TransportMap, opt).value;
    const auto mc = u_monte_carlo(prior, m, v2(0.2, 0.2), 2.0, 10000, 512, 11);
    EXPECT_NEAR(nested, mc.value, 2.0 * *mc.std_error);
}

TEST(Heat, ConfigValidation) {
    HeatSolverConfig c;
    EXPECT_NO_THROW(c.validate());
    c.obs_times = {0.081};
    EXPECT_THROW(c.validate(), ArgumentError);
    c = {};
    c.dt = 0.02;
    EXPECT_THROW(c.validate(), ArgumentError);
    c = {};
    c.obs_times = {0.16, 0.08};
    EXPECT_THROW(c.validate(), ArgumentError);
    EXPECT_THROW(solve_heat(HeatSolverConfig{}, Vector::Zero(3)), ArgumentError);
}

TEST(Heat, ZeroSourceStaysZero) {
    HeatSolverConfig c;
    c.amplitude = 0.0;
    const auto sol = solve_heat(c, v2(0.4, 0.4));
    ASSERT_EQ(sol.snapshots.size(), 5u);
    for (const auto& s : sol.snapshots) EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Heat, MassBalance) {
    const HeatSolverConfig c;
    const Vector x = v2(0.37, 0.61);
    const auto sol = solve_heat(c, x);
    // grid integral of the source with the same trapezoid weights
    const int n = c.grid + 1;
    const double hz = c.spacing();
    double src = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double w = (i == 0 || i == n - 1 ? 0.5 : 1.0) * (j == 0 || j == n - 1 ? 0.5 : 1.0);
            const double r2 = std::pow(i * hz - x(0), 2) + std::pow(j * hz - x(1), 2);
            src += w * hz * hz * std::exp(-r2 / (2 * c.width * c.width)) / (M_PI * c.width * c.width);
        }
    for (std::size_t k = 0; k < c.obs_times.size(); ++k) {
        const double t_on = std::min(c.obs_times[k], c.cutoff);
        EXPECT_NEAR(sol.mass(k), t_on * src, 1e-2 * t_on * src);
    }
}

TEST(Heat, SecondOrderRefinement) {
    HeatSolverConfig c;
    const Vector x = v2(0.3, 0.7);
    const std::vector<Vector> probes{v2(0.25, 0.5), v2(0.5, 0.5), v2(0.75, 0.125), v2(0.0, 1.0)};
    const auto readings = [&](int grid) {
        c.grid = grid;
        const auto sol = solve_heat(c, x);
        Vector all(5 * static_cast<Eigen::Index>(probes.size()));
        for (std::size_t i = 0; i < probes.size(); ++i) all.segment(5 * static_cast<Eigen::Index>(i), 5) = sol.read(probes[i]);
        return all;
    };
    const Vector a = readings(32), b = readings(64), d = readings(128);
    const double coarse = (a - b).cwiseAbs().maxCoeff(), fine = (b - d).cwiseAbs().maxCoeff();
    EXPECT_GE(coarse / fine, 3.0);
}

TEST(Heat, SymmetryPositivityAndMaximumPrinciple) {
    const HeatSolverConfig c;
    const auto sol = solve_heat(c, v2(0.5, 0.5));
    for (double a : {0.0, 0.1, 0.33, 0.8, 1.0}) {
        const Vector p = sol.read(v2(0.5, a)), q = sol.read(v2(a, 0.5));
        EXPECT_LT((p - q).cwiseAbs().maxCoeff(), 1e-10 * p.cwiseAbs().maxCoeff());
    }
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int i = 0; i < 20; ++i) {
        const auto s = solve_heat(c, v2(u(rng), u(rng)));
        for (int j = 0; j < 5; ++j) EXPECT_GT(s.read(v2(u(rng), u(rng)))(0), 0.0);
        for (const auto& m : s.snapshots) EXPECT_GE(m.minCoeff(), -1e-10);
    }
}

TEST(Heat, DihedralInvariance) {
    const HeatSolverConfig c;
    const auto ops = std::vector<std::function<Vector(const Vector&)>>{
        [](const Vector& z) { return v2(1 - z(0), z(1)); },
        [](const Vector& z) { return v2(z(0), 1 - z(1)); },
        [](const Vector& z) { return v2(z(1), z(0)); },
        [](const Vector& z) { return v2(1 - z(1), 1 - z(0)); },
    };
    const Vector x = v2(0.23, 0.41), th = v2(0.7, 0.15);
    const Vector ref = heat_forward(c, x, th);
    for (const auto& op : ops) EXPECT_LT((heat_forward(c, op(x), op(th)) - ref).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Surrogate, CsvRoundTripAndCache) {
    HeatSolverConfig c;
    c.grid = 16;
    PCEOptions opt;
    opt.degree = 2;
    opt.training_points = 5;
    opt.max_train_rms = 1.0;
    opt.refine_steps = 0;
    const auto dir = std::filesystem::temp_directory_path() / "wassoed_test_cache";
    std::filesystem::remove_all(dir);
    const auto fresh = build_pce_surrogate(c, opt, dir);
    EXPECT_TRUE(std::filesystem::exists(dir / ("pce_" + fresh.hash + ".csv")));
    const auto cached = build_pce_surrogate(c, opt, dir);
    EXPECT_EQ(cached.hash, fresh.hash);
    EXPECT_EQ(cached.train_rms, fresh.train_rms);
    for (int k = 0; k < 5; ++k) EXPECT_EQ((cached.coefficients()[k] - fresh.coefficients()[k]).norm(), 0.0);

    std::stringstream ss;
    write_pce_csv(ss, fresh);
    std::string header;
    std::getline(ss, header);
    EXPECT_EQ(header, "out_idx,t_idx,m1,m2,m3,m4,coef");
    std::stringstream bad("out_idx,t_idx,m1,m2,m3,m4,coef\n0,0,0,0,0,x,1\n");
    try {
        read_pce_csv(bad, 2, 5);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
    // a different configuration keys a different file
    c.width = 0.06;
    EXPECT_NE(pce_hash(c, opt), fresh.hash);
    std::filesystem::remove_all(dir);
}

TEST(Surrogate, QualityThresholdEnforced) {
    HeatSolverConfig c;
    c.grid = 16;
    PCEOptions opt;
    opt.degree = 1;
    opt.training_points = 3;
    opt.refine_steps = 0;
    EXPECT_THROW(fit_pce_surrogate(c, opt), SurrogateQualityError);
}

TEST(Surrogate, HeldOutAccuracy) {
    const auto& s = default_surrogate();
    EXPECT_LE(s.train_rms, 1e-2);
    EXPECT_LE(surrogate_holdout_rms(s, HeatSolverConfig{}, 10, 99), 2e-2);
}

TEST(Surrogate, InheritsSquareSymmetry) {
    const auto& s = default_surrogate();
    const Vector x = v2(0.23, 0.41), th = v2(0.7, 0.15);
    const Vector ref = s(x, th);
    const auto flip = [](const Vector& z) { return v2(1 - z(0), z(1)); };
    const auto swap = [](const Vector& z) { return v2(z(1), z(0)); };
    EXPECT_LT((s(flip(x), flip(th)) - ref).cwiseAbs().maxCoeff(), 1e-7 * ref.norm());
    EXPECT_LT((s(swap(x), swap(th)) - ref).cwiseAbs().maxCoeff(), 1e-7 * ref.norm());
    const auto f = example2_model(std::make_shared<PCESurrogate>(s));
    EXPECT_EQ(f.output_dim, 5);
    EXPECT_EQ((f(x, th) - ref).norm(), 0.0);
}
