#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "wassoed/utilities.hpp"

using namespace wassoed;

namespace {

Matrix random_spd(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> z;
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = z(rng);
    return linalg::symmetrize(a * a.transpose() / static_cast<double>(n) + 0.2 * Matrix::Identity(n, n));
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
    std::normal_distribution<double> z;
    Matrix a(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) a(i, j) = z(rng);
    return a;
}

// y = 5 theta^6 x with scalar theta; the model used by the convergence study
GaussianNoiseModel design_model(double sigma = 0.05) {
    ForwardModel f;
    f.name = "g";
    f.input_dim = f.output_dim = f.design_dim = 1;
    f.eval = [](const Vector& x, const Vector& t) -> Vector { return 5.0 * std::pow(t(0), 6) * x; };
    f.linear_operator = [](const Vector& t) { return Matrix::Constant(1, 1, 5.0 * std::pow(t(0), 6)); };
    return {f, Matrix::Constant(1, 1, sigma * sigma)};
}

// same map without the linear hook, which forces the generic routes
GaussianNoiseModel opaque(const GaussianNoiseModel& m) {
    ForwardModel f = m.forward();
    f.linear_operator = nullptr;
    return {f, m.noise_cov()};
}

GaussianNoiseModel constant_model(Eigen::Index n, Eigen::Index d) {
    ForwardModel f;
    f.name = "const";
    f.input_dim = n;
    f.output_dim = d;
    f.design_dim = 1;
    f.eval = [d](const Vector&, const Vector&) -> Vector { return Vector::Constant(d, 0.3); };
    return {f, Matrix::Identity(d, d)};
}

Vector th(double t) { return Vector::Constant(1, t); }

LinearGaussianModel scalar_lg(double c0, double g, double gamma) {
    return {Matrix::Constant(1, 1, g), Matrix::Constant(1, 1, gamma), GaussianMeasure::scalar(0.0, c0)};
}

}  // namespace

TEST(ClosedForm, ScalarExamples) {
    // G = 1, Gamma = 1, C0 = 1 -> C_post = 1/2
    const auto m = scalar_lg(1.0, 1.0, 1.0);
    EXPECT_NEAR(u2_gaussian_closed_form(m).value, 2.0 - 2.0 * std::sqrt(0.5), 1e-14);
    EXPECT_NEAR(u2_gaussian_closed_form(m).value, 0.58579, 1e-5);
    EXPECT_NEAR(u2_gaussian_via_generalized_eigen(m).value, 2.0 - 2.0 * std::sqrt(0.5), 1e-14);
    EXPECT_NEAR(eig_gaussian(m).value, 0.5 * std::log(2.0), 1e-14);
    EXPECT_NEAR(eig_gaussian(m).value, 0.34657, 1e-5);
    const auto z = scalar_lg(1.0, 0.0, 1.0);
    EXPECT_EQ(u2_gaussian_closed_form(z).value, 0.0);
    EXPECT_NEAR(eig_gaussian(z).value, 0.0, 1e-15);
}

TEST(ClosedForm, DiagonalSpecialization) {
    // G = I, Gamma = diag(g): c_post,i = c0 g / (c0 + g)
    Vector c0(3), g(3);
    c0 << 2.0, 0.5, 1.5;
    g << 1.0, 0.1, 4.0;
    const LinearGaussianModel m(Matrix::Identity(3, 3), Matrix(g.asDiagonal()),
                                GaussianMeasure(Vector::Zero(3), Matrix(c0.asDiagonal())));
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double cp = c0(i) * g(i) / (c0(i) + g(i));
        expect += 2.0 * (c0(i) - std::sqrt(c0(i) * cp));
    }
    EXPECT_NEAR(u2_gaussian_closed_form(m).value, expect, 1e-12);
}

TEST(ClosedForm, GeneralizedEigenRouteAgrees) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index n = 1 + trial % 5, d = 1 + (trial / 5) % 5;
        const LinearGaussianModel m(random_matrix(rng, d, n), random_spd(rng, d),
                                    GaussianMeasure(Vector::Zero(n), random_spd(rng, n)));
        const double a = u2_gaussian_closed_form(m).value, b = u2_gaussian_via_generalized_eigen(m).value;
        EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::abs(a)));
    }
    const LinearGaussianModel iso(Matrix::Zero(1, 2), Matrix::Identity(1, 1), GaussianMeasure::standard(2));
    EXPECT_NEAR(u2_gaussian_via_generalized_eigen(iso).value, 0.0, 1e-14);
}

TEST(ClosedForm, SingularPriorRejectedByEigenRoute) {
    Matrix c0 = Matrix::Zero(2, 2);
    c0(0, 0) = 1.0;
    const LinearGaussianModel m(Matrix::Identity(2, 2), Matrix::Identity(2, 2), GaussianMeasure(Vector::Zero(2), c0));
    EXPECT_THROW(u2_gaussian_via_generalized_eigen(m), ArgumentError);
}

TEST(Weighted, Reductions) {
    std::mt19937_64 rng(8);
    const LinearGaussianModel m(random_matrix(rng, 3, 3), random_spd(rng, 3),
                                GaussianMeasure(Vector::Zero(3), random_spd(rng, 3)));
    EXPECT_NEAR(weighted_u2(m, Matrix::Identity(3, 3)), u2_gaussian_closed_form(m).value, 1e-12);
    // 1D: every weighting reproduces the unweighted value after rescaling by B^2
    const auto s = scalar_lg(1.0, 1.0, 1.0);
    EXPECT_NEAR(weighted_u2(s, Matrix::Identity(1, 1)), 2.0 - 2.0 * std::sqrt(0.5), 1e-14);
    // C_post = diag(0.5, 0.25)
    Matrix gam(2, 2);
    gam << 1.0, 0.0, 0.0, 1.0 / 3.0;
    const LinearGaussianModel a(Matrix::Identity(2, 2), gam, GaussianMeasure::standard(2));
    EXPECT_NEAR(weighted_a_optimality(a, Matrix::Identity(2, 2)), -0.75, 1e-14);
    EXPECT_THROW(weighted_u2(a, Matrix::Zero(2, 2)), ArgumentError);
    EXPECT_THROW(weighted_a_optimality(a, Matrix::Ones(2, 2)), ArgumentError);
}

TEST(Eig, SmallerNoiseIsMoreInformative) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
        const double c0 = u(rng), g = u(rng), gamma = u(rng);
        EXPECT_GT(eig_gaussian(scalar_lg(c0, g, 0.5 * gamma)).value, eig_gaussian(scalar_lg(c0, g, gamma)).value);
    }
}

TEST(Nested, GaussianInnerMatchesClosedForm) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 40; ++trial) {
        const Eigen::Index n = 1 + trial % 5, d = 1 + (trial / 5) % 5;
        const Matrix a = random_matrix(rng, d, n);
        const LinearGaussianModel lg(a, random_spd(rng, d), GaussianMeasure(random_matrix(rng, n, 1), random_spd(rng, n)));
        const double cf = u2_gaussian_closed_form(lg).value;
        const double nested = u2_nested(lg.prior(), lg.as_noise_model(), Vector(), InnerMethod::GaussianClosedForm).value;
        EXPECT_NEAR(nested, cf, 1e-8 * std::max(1.0, cf)) << "n=" << n << " d=" << d;
    }
}

TEST(Nested, TransportMapAndDiscreteRoutesIn1D) {
    const auto m = design_model();
    const Measure prior = GaussianMeasure::scalar(0, 1);
    for (double t : {0.6, 0.8, 1.0}) {
        const auto lg = LinearGaussianModel(m.forward().linear_operator(th(t)), m.noise_cov(), std::get<GaussianMeasure>(prior));
        const double cf = u2_gaussian_closed_form(lg).value;
        EXPECT_NEAR(u2_nested(prior, m, th(t), InnerMethod::TransportMap).value, cf, 1e-6 * (1 + cf));
        NestedOptions opt;
        opt.posterior_cells = 8192;
        EXPECT_NEAR(u2_nested(prior, m, th(t), InnerMethod::DiscreteOT, opt).value, cf, 2e-3 * (1 + cf)) << t;
        EXPECT_NEAR(u2_nested(prior, opaque(m), th(t), InnerMethod::TransportMap, opt).value, cf, 2e-3 * (1 + cf)) << t;
    }
}

TEST(Nested, IncompatibleInnerMethod) {
    const Measure u = UniformBoxMeasure::interval(0, 1);
    EXPECT_THROW(u2_nested(u, design_model(), th(1.0), InnerMethod::GaussianClosedForm), ArgumentError);
    const Measure e = EmpiricalMeasure::uniform_1d({0.0, 1.0});
    EXPECT_THROW(u2_nested(e, opaque(design_model()), th(1.0), InnerMethod::TransportMap), ArgumentError);
}

TEST(Nested, NonInformativeModelsGiveZero) {
    const Vector t = th(0.5);
    NestedOptions opt;
    opt.noise_nodes = standard_normal_rule(2, 13);
    opt.posterior_cells = 256;
    for (const Measure& prior : {Measure(GaussianMeasure::scalar(0, 1)), Measure(UniformBoxMeasure::interval(0, 1))}) {
        opt.prior_nodes = prior_rule(prior, 9);
        const auto m = constant_model(1, 2);
        EXPECT_NEAR(u1_nested(prior, m, t, opt).value, 0.0, 1e-10);
        EXPECT_NEAR(u2_nested(prior, m, t, InnerMethod::TransportMap, opt).value, 0.0, 1e-10);
        EXPECT_NEAR(u2_nested(prior, m, t, InnerMethod::DiscreteOT, opt).value, 0.0, 1e-10);
        EXPECT_NEAR(eig_baseline(prior, m, t, EigMethod::NestedQuadrature, opt).value, 0.0, 1e-10);
    }
    const Measure box2 = UniformBoxMeasure::unit_cube(2);
    NestedOptions o2;
    o2.prior_nodes = prior_rule(box2, 3);
    o2.noise_nodes = gauss_hermite(5);
    EXPECT_NEAR(u2_nested(box2, constant_model(2, 1), t, InnerMethod::DiscreteOT, o2).value, 0.0, 1e-10);
    const auto atoms = sample(GaussianMeasure::scalar(0, 1), 25, 3);
    EXPECT_NEAR(u1_empirical(atoms, constant_model(1, 1), t, gauss_hermite(9)).value, 0.0, 1e-12);
    // the linear model at theta = 0
    const auto m = design_model();
    EXPECT_NEAR(u1_nested(GaussianMeasure::scalar(0, 1), m, th(0.0)).value, 0.0, 1e-10);
    EXPECT_NEAR(u1_empirical_evidence_grid(atoms, m, th(0.0)).value, 0.0, 1e-12);
}

TEST(U1, NestedAgainstDoubleMonteCarlo) {
    // Independent oracle: y ~ evidence, exact W_1 between Gaussians E|dm + ds Z|.
    const auto m = design_model();
    const double sigma2 = 0.0025;
    std::mt19937_64 rng(2024);
    for (double t : {1.0, 0.7, 0.85, 0.9, 0.95, 0.8}) {
        const double g = 5.0 * std::pow(t, 6);
        const double cp = sigma2 / (g * g + sigma2), gain = g / (g * g + sigma2);
        std::normal_distribution<double> y(0.0, std::sqrt(g * g + sigma2));
        const int n = 100000;
        double s = 0, s2 = 0;
        for (int i = 0; i < n; ++i) {
            const double w = special::mean_abs_normal(gain * y(rng), std::sqrt(cp) - 1.0);
            s += w;
            s2 += w * w;
        }
        const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
        const double v = u1_nested(GaussianMeasure::scalar(0, 1), m, th(t)).value;
        EXPECT_NEAR(v, mean, 3.0 * se) << "theta=" << t;
    }
}

TEST(U1, HistogramRouteAgreesWithConjugateRoute) {
    const auto m = design_model();
    const Measure prior = GaussianMeasure::scalar(0, 1);
    NestedOptions opt;
    opt.posterior_cells = 8192;
    for (double t : {0.5, 0.8, 1.0}) {
        const double a = u1_nested(prior, m, th(t)).value;
        const double b = u1_nested(prior, opaque(m), th(t), opt).value;
        EXPECT_NEAR(a, b, 2e-3 * (1 + a)) << t;
    }
}

TEST(U1, EmpiricalSingleAtomIsZero) {
    const auto m = design_model();
    EXPECT_EQ(u1_empirical(EmpiricalMeasure::uniform_1d({0.4}), m, th(1.0), gauss_hermite(5)).value, 0.0);
    EXPECT_EQ(u1_empirical_evidence_grid(EmpiricalMeasure::uniform_1d({0.4}), m, th(1.0)).value, 0.0);
}

TEST(U1, TwoAtomReductionAgainstMonteCarlo) {
    // atoms {-1, 1}, G(x) = x, Gamma = 1: W_1(mu_M, mu_M^y) = 2 |w_1(y) - 1/2|
    ForwardModel f;
    f.name = "id";
    f.input_dim = f.output_dim = 1;
    f.design_dim = 0;
    f.eval = [](const Vector& x, const Vector&) -> Vector { return x; };
    f.linear_operator = [](const Vector&) { return Matrix::Identity(1, 1); };
    const GaussianNoiseModel m(f, Matrix::Identity(1, 1));
    const auto atoms = EmpiricalMeasure::uniform_1d({-1.0, 1.0});
    const double v = u1_empirical(atoms, m, Vector(), gauss_hermite(64)).value;
    std::mt19937_64 rng(77);
    std::normal_distribution<double> z;
    std::bernoulli_distribution coin(0.5);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double y = (coin(rng) ? 1.0 : -1.0) + z(rng);
        const double w1 = 1.0 / (1.0 + std::exp(2.0 * y));  // weight of atom -1
        const double term = 2.0 * std::abs(w1 - 0.5);
        s += term;
        s2 += term * term;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    // W_1(y) has kinks, so per-atom Gauss-Hermite carries a small bias
    EXPECT_NEAR(v, mean, 2.0 * se + 1e-2);
    EXPECT_NEAR(u1_empirical_evidence_grid(atoms, m, Vector()).value, mean, 2.5 * se);
}

TEST(U1, EvidenceGridMatchesPerAtomQuadrature) {
    const auto m = design_model();
    for (double t : {0.3, 0.6, 1.0, -0.8}) {
        for (int count : {2, 7, 40}) {
            const auto atoms = sample(GaussianMeasure::scalar(0, 1), count, static_cast<std::uint64_t>(count));
            const double a = u1_empirical(atoms, m, th(t), gauss_hermite(96)).value;
            const double b = u1_empirical_evidence_grid(atoms, m, th(t)).value;
            EXPECT_NEAR(a, b, 1e-2 * a) << "theta=" << t << " M=" << count;
            EvidenceGridOptions fine;
            fine.panel_width = 0.1;
            fine.nodes_per_panel = 12;
            const double c = u1_empirical_evidence_grid(atoms, m, th(t), fine).value;
            EXPECT_NEAR(b, c, 2e-4 * c) << "theta=" << t << " M=" << count;
        }
    }
}

TEST(U1, EmpiricalApproachesNestedValue) {
    const auto m = design_model();
    const double ref = u1_nested(GaussianMeasure::scalar(0, 1), m, th(1.0)).value;
    const auto atoms = sample(GaussianMeasure::scalar(0, 1), 20000, 5);
    EXPECT_NEAR(u1_empirical_evidence_grid(atoms, m, th(1.0)).value, ref, 0.03 * ref);
}

TEST(Eig, NestedMatchesClosedForm) {
    const auto m = design_model();
    const Measure prior = GaussianMeasure::scalar(0, 1);
    NestedOptions opt;
    opt.posterior_cells = 8192;
    for (double t : {0.5, 0.8, 1.0}) {
        const double cf = eig_baseline(prior, m, th(t), EigMethod::GaussianClosedForm).value;
        EXPECT_NEAR(eig_baseline(prior, m, th(t), EigMethod::NestedQuadrature, opt).value, cf, 2e-3 * (1 + cf));
    }
    // 2D grid atoms
    const LinearGaussianModel lg(Matrix::Identity(2, 2), 0.3 * Matrix::Identity(2, 2), GaussianMeasure::standard(2));
    NestedOptions o2;
    o2.prior_nodes = prior_rule(GaussianMeasure::standard(2), 12);
    const double cf = eig_gaussian(lg).value;
    EXPECT_NEAR(eig_baseline(lg.prior(), lg.as_noise_model(), Vector(), EigMethod::NestedQuadrature, o2).value, cf,
                5e-3 * cf);
    EXPECT_THROW(eig_baseline(UniformBoxMeasure::interval(0, 1), m, th(1.0), EigMethod::GaussianClosedForm),
                 ArgumentError);
}

TEST(Eig, SingularPosteriorFlagged) {
    // noise-free direction: Gamma tiny relative to the prior
    const LinearGaussianModel lg(Matrix::Identity(1, 1), Matrix::Constant(1, 1, 1e-300), GaussianMeasure::scalar(0, 1));
    const auto u = eig_gaussian(lg);
    EXPECT_TRUE(u.diverged);
    EXPECT_TRUE(std::isinf(u.value));
}

TEST(Nested, TwoDimensionalDiscreteAgainstClosedForm) {
    // 2D Gaussian prior on a grid; the discrete route converges to the closed form
    Matrix c0(2, 2);
    c0 << 1.0, 0.3, 0.3, 0.6;
    Matrix a(1, 2);
    a << 1.0, -0.5;
    const LinearGaussianModel lg(a, Matrix::Constant(1, 1, 0.5), GaussianMeasure(Vector::Zero(2), c0));
    NestedOptions opt;
    opt.prior_nodes = prior_rule(lg.prior(), 3);
    opt.noise_nodes = gauss_hermite(4);
    const double cf = u2_gaussian_closed_form(lg).value;
    // the grid bias is O(h^2); one Richardson step removes most of it
    opt.atoms_per_dim = 16;
    const double coarse = u2_nested(lg.prior(), lg.as_noise_model(), Vector(), InnerMethod::DiscreteOT, opt).value;
    opt.atoms_per_dim = 32;
    const double fine = u2_nested(lg.prior(), lg.as_noise_model(), Vector(), InnerMethod::DiscreteOT, opt).value;
    EXPECT_GT(coarse, fine);
    EXPECT_GT(fine, cf);
    EXPECT_NEAR((4.0 * fine - coarse) / 3.0, cf, 0.02 * cf);
}

TEST(Nested, MongeAmpereInnerOnWeaklyInformativeBox) {
    // identity map with isotropic noise: the problem splits per axis, so the
    // 2D value is twice the 1D value under a tensor outer rule
    const auto identity = [](Eigen::Index n) {
        ForwardModel f;
        f.name = "id";
        f.input_dim = f.output_dim = n;
        f.design_dim = 0;
        f.eval = [](const Vector& x, const Vector&) -> Vector { return x; };
        return GaussianNoiseModel(f, 4.0 * Matrix::Identity(n, n));
    };
    const Measure box = UniformBoxMeasure::unit_cube(2);
    NestedOptions opt;
    opt.prior_nodes = prior_rule(box, 2);
    opt.noise_nodes = tensor_product({gauss_hermite(3), gauss_hermite(3)});
    const double ma = u2_nested(box, identity(2), Vector(), InnerMethod::TransportMap, opt).value;

    const Measure unit = UniformBoxMeasure::interval(0, 1);
    NestedOptions o1;
    o1.prior_nodes = prior_rule(unit, 2);
    o1.noise_nodes = gauss_hermite(3);
    o1.posterior_cells = 8192;
    const double ref = 2.0 * u2_nested(unit, identity(1), Vector(), InnerMethod::TransportMap, o1).value;
    EXPECT_GT(ma, 0.0);
    EXPECT_NEAR(ma, ref, 0.02 * ref);
}

TEST(MonteCarlo, AgreesWithNestedOnDesignModel) {
    const auto m = design_model();
    const Measure prior = GaussianMeasure::scalar(0, 1);
    for (double t : {0.75, 1.0}) {
        const auto mc = u_monte_carlo(prior, m, th(t), 1.0, 4000, 2000, 31);
        ASSERT_TRUE(mc.std_error.has_value());
        const double ref = u1_nested(prior, m, th(t)).value;
        // inner discretization on 2000 quantile atoms adds a small bias
        EXPECT_NEAR(mc.value, ref, 3.0 * *mc.std_error + 2e-3);
    }
}

TEST(Bound, EstimatesRespectMomentBound) {
    const auto m = design_model();
    const Measure prior = GaussianMeasure::scalar(0, 1);
    for (double t : {0.0, 0.5, 1.0}) {
        EXPECT_TRUE(within_moment_bound(u1_nested(prior, m, th(t)), prior, 1.0));
        EXPECT_TRUE(within_moment_bound(u2_nested(prior, m, th(t), InnerMethod::GaussianClosedForm), prior, 2.0));
    }
    UtilityEstimate too_big;
    too_big.value = 4.1;
    EXPECT_FALSE(within_moment_bound(too_big, prior, 2.0));
}
