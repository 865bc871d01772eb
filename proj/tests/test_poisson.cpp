#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fueterlab/poisson.hpp"
#include "fueterlab/suite.hpp"

using namespace fueterlab;

namespace {

double max_abs_diff(const ScalarGrid& a, const ScalarGrid& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

double mean(const ScalarGrid& a) {
    double s = 0;
    for (double x : a.v) s += x;
    return s / a.size();
}

ScalarGrid random_grid(std::mt19937_64& rng, std::vector<int> dims, double h) {
    ScalarGrid f(std::move(dims), h);
    std::normal_distribution<double> N(0, 1);
    for (double& x : f.v) x = N(rng);
    return f;
}

PerturbedProblem manufactured(ProblemSpec s, double rho, ScalarGrid* w_star) {
    PerturbedProblem P = make_problem(s);
    *w_star = odd_bump(P.chi.dims, P.chi.h, rho);
    P.f = manufactured_source(P, *w_star);
    return P;
}

}  // namespace

TEST(PoissonSolve, ZeroField) {
    ScalarGrid z({16, 16}, 0.25);
    for (double x : poisson_solve(z).v) EXPECT_EQ(x, 0.0);
}

TEST(PoissonSolve, FourierModeIsEigenfunction) {
    const int n = 32;
    const double L = 2.0, h = L / n;
    for (int k : {1, 3}) {
        auto f = ScalarGrid::sample({n, n}, h, [&](const double* x) { return std::sin(2 * M_PI * k * x[0] / L); });
        ScalarGrid spec = poisson_solve(f, Symbol::spectral);
        ScalarGrid disc = poisson_solve(f, Symbol::discrete);
        double c = -std::pow(L / (2 * M_PI * k), 2);
        double lam = (2 * std::cos(2 * M_PI * k / n) - 2) / (h * h);
        for (std::size_t i = 0; i < f.size(); ++i) {
            EXPECT_NEAR(spec.v[i], c * f.v[i], 1e-13);
            EXPECT_NEAR(disc.v[i], f.v[i] / lam, 1e-13);
        }
    }
}

TEST(PoissonSolve, ResidualAndMeanZero) {
    std::mt19937_64 rng(2);
    for (auto dims : {std::vector<int>{64, 64}, std::vector<int>{12, 12, 12, 12}}) {
        ScalarGrid f = random_grid(rng, dims, 0.1);
        ScalarGrid v = poisson_solve(f);
        ScalarGrid lap = periodic::laplacian(v);
        double m = mean(f);
        for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(lap.v[i], f.v[i] - m, 1e-10);
        EXPECT_NEAR(mean(v), 0.0, 1e-12);
    }
}

TEST(PoissonSolve, InvertsLaplacianOnMeanZeroGrids) {
    std::mt19937_64 rng(4);
    ScalarGrid w = random_grid(rng, {32, 32}, 0.05);
    double m = mean(w);
    for (double& x : w.v) x -= m;
    EXPECT_LT(max_abs_diff(poisson_solve(periodic::laplacian(w)), w), 1e-10);
}

TEST(PoissonSolve, DomainDoublingChangesSolutionLittle) {
    // fixed odd source; doubling the torus moves the solution near the source only slightly
    auto solve_on = [](int n, double L) {
        ProblemSpec s;
        s.d = 4;
        s.n = n;
        s.L = L;
        s.magnitude = 0;
        ScalarGrid src = odd_bump(std::vector<int>(4, n), L / n, 1.0);
        return std::make_pair(poisson_solve(src), src);
    };
    auto [v1, s1] = solve_on(16, 8.0);
    auto [v2, s2] = solve_on(32, 16.0);
    double diff = 0, top = 0;
    std::vector<int> i1(4), i2(4);
    for (std::size_t lin = 0; lin < v1.size(); ++lin) {
        v1.unravel(lin, i1.data());
        bool near = true;
        for (int a = 0; a < 4; ++a) {
            near = near && std::abs(i1[a] - 8) <= 4;
            i2[a] = i1[a] + 8;
        }
        if (!near) continue;
        double b = v2.v[v2.ravel(i2.data())];
        diff = std::max(diff, std::abs(v1.v[lin] - b));
        top = std::max(top, std::abs(b));
    }
    EXPECT_LT(diff, 0.05 * top);
}

TEST(ContractionStep, TrivialCases) {
    ProblemSpec s;
    s.d = 2;
    s.n = 64;
    PerturbedProblem P = make_problem(s);
    ScalarGrid zero = P.f;
    for (double x : contraction_step(zero, P).v) EXPECT_EQ(x, 0.0);

    // unperturbed, chi = 1 on the support of f
    s.magnitude = 0;
    PerturbedProblem Q = make_problem(s);
    Q.f = odd_bump(Q.chi.dims, Q.chi.h, 0.1);
    ScalarGrid v = contraction_step(zero, Q);
    EXPECT_LT(max_abs_diff(v, poisson_solve(Q.f)), 1e-12);
}

TEST(ContractionStep, ManufacturedSolutionIsFixed) {
    for (int d : {2, 4}) {
        ProblemSpec s;
        s.d = d;
        s.n = d == 2 ? 64 : 24;
        ScalarGrid w;
        PerturbedProblem P = manufactured(s, 0.5, &w);
        ScalarGrid v = contraction_step(w, P);
        EXPECT_LT(max_abs_diff(v, w), 1e-10 * w.sup()) << "d=" << d;
    }
}

TEST(ContractionStep, ManufacturedSourceNeedsCutoffSupport) {
    ProblemSpec s;
    s.d = 2;
    s.n = 64;
    PerturbedProblem P = make_problem(s);
    EXPECT_THROW(manufactured_source(P, odd_bump(P.chi.dims, P.chi.h, 2.0)), std::invalid_argument);
}

TEST(FixedPoint, ZeroSourceStopsAfterOneIteration) {
    ProblemSpec s;
    s.d = 2;
    s.n = 32;
    auto r = fixed_point_solve(make_problem(s), 1e-12, 10);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.iterations, 1);
    for (double x : r.v.v) EXPECT_EQ(x, 0.0);
}

TEST(FixedPoint, ManufacturedRecoveryAndGeometricDecrease) {
    ProblemSpec s;
    s.d = 2;
    s.n = 128;
    ScalarGrid w;
    PerturbedProblem P = manufactured(s, 0.6, &w);
    const double tol = 1e-12;
    auto r = fixed_point_solve(P, tol, 200);
    ASSERT_TRUE(r.converged) << r.diagnostic;
    EXPECT_LT(max_abs_diff(r.v, w), 1e-6 * w.sup());
    EXPECT_LT(r.residual, 10 * tol);
    EXPECT_LT(r.contraction, 0.5);
    // decrease over every 4-step window
    for (std::size_t k = 4; k < r.increments.size(); ++k) EXPECT_LT(r.increments[k], r.increments[k - 4]);
}

TEST(FixedPoint, LargeCoefficientsDiagnosedAsNonContraction) {
    ProblemSpec s;
    s.d = 4;
    s.n = 24;
    s.magnitude = 1.0;
    ScalarGrid w;
    PerturbedProblem P = manufactured(s, 0.5, &w);
    auto r = fixed_point_solve(P, 1e-12, 200);
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.diagnostic, "non-contraction");
}

TEST(FixedPoint, RejectsMalformedProblems) {
    ProblemSpec s;
    s.d = 2;
    s.n = 16;
    PerturbedProblem P = make_problem(s);
    PerturbedProblem asym = P;
    asym.mu[1].v[0] += 1;
    EXPECT_THROW(fixed_point_solve(asym, 1e-8, 5), std::invalid_argument);
    PerturbedProblem shape = P;
    shape.f = ScalarGrid({8, 8}, 0.5);
    EXPECT_THROW(fixed_point_solve(shape, 1e-8, 5), std::invalid_argument);
    EXPECT_THROW(fixed_point_solve(P, 0.0, 5), std::invalid_argument);
    s.L = 2;  // torus smaller than 4x the cutoff support
    EXPECT_THROW(make_problem(s), std::invalid_argument);
}

TEST(W21Norm, ConstantAndAffine) {
    Grid g = Grid::box(1, 1, 0.5, 1.0 / 8);
    std::size_t interior = 1;
    for (int d : g.dims) interior *= static_cast<std::size_t>(d - 2);
    auto c = GridField::sample(g, [](const double*, double* o) {
        o[0] = 3;
        o[1] = 0;
        o[2] = 4;
        o[3] = 0;
    });
    EXPECT_NEAR(w21_norm(c), 5.0 * interior * g.cell_volume(), 1e-12);

    // affine: no second-derivative contribution
    Eigen::MatrixXd A(4, 4);
    A << 1, 2, 0, -1, 0, 1, 3, 0, 2, 0, 0, 1, -1, 1, 1, 1;
    auto a = GridField::sample(g, [&](const double* x, double* o) {
        for (int r = 0; r < 4; ++r) {
            o[r] = 0.5;
            for (int k = 0; k < 4; ++k) o[r] += A(r, k) * x[k];
        }
    });
    double expect = 0;
    int idx[4];
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (!g.interior(idx, 1)) continue;
        expect += Eigen::Map<const Eigen::Vector4d>(a.at(lin)).norm() + A.norm();
    }
    EXPECT_NEAR(w21_norm(a), expect * g.cell_volume(), 1e-10 * expect * g.cell_volume());
}

TEST(W21Norm, TriholomorphicSuiteRegression) {
    for (int n : {1, 2})
        for (double L : {0.5, 1.0}) {
            Grid g = Grid::box(1, n, L, L / 8);
            for (auto& nf : triholomorphic_suite(1, n)) {
                GridField u = GridField::sample(g, nf.field);
                double ratio = w21_norm(u) / (1 + dirichlet_energy(u));
                EXPECT_LE(ratio, kW21Constant) << nf.name << " n=" << n << " L=" << L;
            }
        }
}
