// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fueterlab/bubbletree.hpp"
#include "fueterlab/exterior.hpp"
#include "fueterlab/fields.hpp"
#include "fueterlab/manifest.hpp"
#include "fueterlab/monotone.hpp"
#include "fueterlab/norms.hpp"
#include "fueterlab/poisson.hpp"
#include "fueterlab/suite.hpp"
#include "oracles.hpp"

using namespace fueterlab;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void run(int id, const std::string& title, const std::function<Outcome()>& body) {
    auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("[%2d] %s  %s | %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

template <class F>
auto lazy(const Grid& g, F f) {
    return FunctionField<F>(g, f);
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    Eigen::MatrixXd K(A.rows() * B.rows(), A.cols() * B.cols());
    for (int i = 0; i < A.rows(); ++i)
        for (int j = 0; j < A.cols(); ++j) K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    return K;
}

Outcome energy_identity() {
    auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    StructureTriple S1(1), S2(2);
    EnergyIdentity e1(S1, S1), e2(S2, S1);
    double worst = 0;
    for (int t = 0; t < 10000; ++t) worst = std::max(worst, std::abs(e1.defect(oracle::random_matrix(rng, 4, 4))));
    for (int t = 0; t < 1000; ++t) worst = std::max(worst, std::abs(e2.defect(oracle::random_matrix(rng, 4, 8))));
    double dt = seconds_since(t0);
    return {worst < 1e-10 && dt < 30,
            "max |defect| " + fmt("%.2e", worst) + " < 1e-10 over 1e4 (m=1) + 1e3 (m=2) jets, " +
                fmt("%.2f s < 30 s", dt)};
}

Outcome linear_kernel() {
    StructureTriple S(1);
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(16, 16);
    for (int u = 0; u < 3; ++u) M -= kron(oracle::left_unit(u, 1).transpose(), oracle::left_unit(u, 1));
    Eigen::MatrixXd ker = Eigen::FullPivLU<Eigen::MatrixXd>(M).kernel();
    double worst = 0;
    for (int c = 0; c < ker.cols(); ++c) {
        Eigen::MatrixXd A = Eigen::Map<Eigen::MatrixXd>(ker.col(c).data(), 4, 4);
        worst = std::max(worst, triholo_residual(A, S, S).norm());
    }
    auto basis = triholo_kernel(S, S);
    for (const auto& A : basis) worst = std::max(worst, triholo_residual(A, S, S).norm());
    int dim = static_cast<int>(ker.cols());
    bool ok = worst < 1e-12 && dim == 12 && static_cast<int>(basis.size()) == dim;
    return {ok, "oracle dim " + std::to_string(dim) + " (frozen 12), library dim " + std::to_string(basis.size()) +
                    ", max residual " + fmt("%.2e < 1e-12", worst)};
}

Outcome flat_monotonicity() {
    auto t0 = Clock::now();
    auto f = HolomorphicField::random_polynomial(1, 1, 3, 1, 0.5);
    const double origin[4] = {0, 0, 0, 0};
    std::vector<double> hs = {1.0 / 32, 1.0 / 64, 1.0 / 128}, d;
    for (double h : hs) d.push_back(std::abs(monotonicity_defect(lazy(Grid::box(1, 1, 0.5, h), f), origin, 0.1, 0.4)));
    double slope = oracle::loglog_slope(hs, d);
    double dt = seconds_since(t0);
    bool dec = d[1] < d[0] && d[2] < d[1];
    return {dec && slope >= 1.0 && dt < 120,
            "defects " + fmt("%.2e", d[0]) + fmt(" %.2e", d[1]) + fmt(" %.2e", d[2]) + ", slope " +
                fmt("%.2f >= 1.0", slope) + fmt(", %.1f s < 120 s", dt)};
}

Outcome jacobian_laplacian() {
    std::string detail;
    bool ok = true;
    for (int m : {1, 2}) {
        auto f = HolomorphicField::random_smooth(m, 1, 31 + m, 0.7);
        StructureTriple dom(m), tar(1);
        std::vector<double> hs = {1.0 / 16, 1.0 / 32, 1.0 / 64}, direct, gap;
        for (double h : hs) {
            Grid g = Grid::box(m, 1, 4 * h, h);
            g.dims.assign(4 * m, 9);
            auto u = lazy(g, [&](const double* x, double* o) {
                double y[8];
                for (int a = 0; a < 4 * m; ++a) y[a] = x[a] + 0.1;
                f(y, o);
            });
            std::vector<int> idx(4 * m, 4);
            std::size_t node = g.ravel(idx.data());
            Eigen::VectorXd dl = laplacian_direct(u, node);
            Eigen::VectorXd jl = laplacian_jacobian_form(u, node, dom, tar);
            direct.push_back(dl.norm());
            gap.push_back((jl - dl).norm());
        }
        double s1 = oracle::loglog_slope(hs, gap), s2 = oracle::loglog_slope(hs, direct);
        ok = ok && std::abs(s1 - 2) <= 0.2 && std::abs(s2 - 2) <= 0.2;
        detail += "m=" + std::to_string(m) + fmt(": gap slope %.2f", s1) + fmt(", |Lap u| slope %.2f; ", s2);
    }
    return {ok, detail + "target 2.0 +- 0.2"};
}

Outcome radial_scaling() {
    std::string detail;
    bool ok = true;
    for (int m : {1, 2}) {
        StructureTriple S(m);
        int n = 4 * m;
        for (bool weighted : {false, true}) {
            Eigen::VectorXd x = Eigen::VectorXd::Unit(n, 0);
            if (m == 1) x << 0.8, 0.3, -0.4, 0.25;
            Eigen::MatrixXd probe = Eigen::MatrixXd::Identity(n, n).rightCols(n - 1);
            for (Unit u : {Unit::i, Unit::j, Unit::k}) {
                std::vector<double> hs = {0.08, 0.04, 0.02, 0.01}, err;
                for (double h : hs) err.push_back(radial_scaling_defect(S, u, x, probe, h, weighted));
                double s = oracle::loglog_slope(hs, err);
                ok = ok && std::abs(s - 2) <= 0.1;
                if (u == Unit::i) detail += "m=" + std::to_string(m) + (weighted ? " weighted " : " plain ") + fmt("%.3f; ", s);
            }
        }
    }
    return {ok, "slopes (unit i shown, i/j/k checked) " + detail + "target 2.0 +- 0.1"};
}

Outcome fixed_point() {
    ProblemSpec s;  // R^4, n = 40
    PerturbedProblem P = make_problem(s);
    ScalarGrid w = odd_bump(P.chi.dims, P.chi.h, 0.5);
    P.f = manufactured_source(P, w);
    auto r = fixed_point_solve(P, 1e-12, 200);
    double err = 0;
    for (std::size_t i = 0; i < w.size(); ++i) err = std::max(err, std::abs(r.v.v[i] - w.v[i]));
    err /= w.sup();

    ProblemSpec big;
    big.n = 24;
    big.magnitude = 1.0;
    PerturbedProblem Q = make_problem(big);
    ScalarGrid wq = odd_bump(Q.chi.dims, Q.chi.h, 0.5);
    Q.f = manufactured_source(Q, wq);
    auto rq = fixed_point_solve(Q, 1e-12, 200);
    bool ok = r.converged && err <= 1e-6 && r.contraction < 0.5 && rq.diagnostic == "non-contraction";
    return {ok, fmt("relative error %.2e <= 1e-6", err) + fmt(", contraction %.3f < 0.5 at 0.05", r.contraction) +
                    ", magnitude 1.0: '" + rq.diagnostic + "' at iteration " + std::to_string(rq.iterations)};
}

Outcome w21_regression() {
    double worst = 0;
    std::string arg;
    for (int n : {1, 2})
        for (double L : {0.5, 1.0}) {
            Grid g = Grid::box(1, n, L, L / 8);
            for (auto& nf : triholomorphic_suite(1, n)) {
                GridField u = GridField::sample(g, nf.field);
                double ratio = w21_norm(u) / (1 + dirichlet_energy(u));
                if (ratio > worst) {
                    worst = ratio;
                    arg = nf.name + " n=" + std::to_string(n);
                }
            }
        }
    return {worst <= kW21Constant,
            fmt("max w21/(1+E) %.3f", worst) + " (" + arg + ")" + fmt(" <= C = %.1f", kW21Constant)};
}

ScalarGrid random_field(std::mt19937_64& rng, int d, int n) {
    ScalarGrid f = ScalarGrid::cube(d, n, 1.0 / n);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::bernoulli_distribution sparse(0.2);
    for (double& x : f.v) x = sparse(rng) ? 5 * U(rng) : U(rng);
    return f;
}

Outcome maximal_weak_l1() {
    std::mt19937_64 rng(202);
    double worst = 0;
    long checks = 0;
    for (int d : {2, 4})
        for (int trial = 0; trial < 1000; ++trial) {
            auto f = random_field(rng, d, d == 2 ? 16 : 5);
            auto M = hl_maximal(f);
            // every distinct value of Mf is a jump of the distribution function
            std::vector<double> lv = M.v;
            std::sort(lv.begin(), lv.end());
            lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
            for (double l : lv) {
                for (double lam : {l, l * (1 - 1e-12)}) {
                    if (!(lam > 0)) continue;
                    auto w = weak_l1_check(f, lam, &M);
                    worst = std::max(worst, w.measure / w.bound);
                    ++checks;
                }
            }
        }
    return {worst <= 1.0, "max |{Mf > l}| / (5^d |f|_1 / l) = " + fmt("%.3f <= 1", worst) + " over " +
                              std::to_string(checks) + " (field, l) pairs, 1e3 fields each in 2-D and 4-D"};
}

Outcome lorentz() {
    std::mt19937_64 rng(303);
    double eq = 0;
    for (int trial = 0; trial < 100; ++trial) {
        ScalarGrid ind = ScalarGrid::cube(2, 16, 1.0 / 16);
        std::bernoulli_distribution on(0.05 + 0.9 * trial / 100.0);
        for (double& x : ind.v) x = on(rng) ? 1.0 : 0.0;
        ind.v[trial] = 1;
        double a = std::sqrt(ind.l1());
        auto s = interpolation_sides(ind, 1.0);
        eq = std::max({eq, std::abs(lorentz_21(ind) - a), std::abs(lorentz_2inf(ind) - a), std::abs(s.lhs - s.rhs)});
    }
    std::normal_distribution<double> N(0, 1);
    std::uniform_real_distribution<double> P(0, 2 * M_PI);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<ScalarGrid> slice;
        for (int c = 0; c < 2; ++c) {
            double k[4][2], ph[4], amp[4];
            for (int w = 0; w < 4; ++w) {
                k[w][0] = 6 * N(rng);
                k[w][1] = 6 * N(rng);
                ph[w] = P(rng);
                amp[w] = N(rng);
            }
            slice.push_back(ScalarGrid::sample({24, 24}, 1.0 / 23, [&](const double* x) {
                double s = 0;
                for (int w = 0; w < 4; ++w) s += amp[w] * std::sin(k[w][0] * x[0] + k[w][1] * x[1] + ph[w]);
                return s;
            }));
        }
        auto r = lorentz_interpolation_check(slice);
        if (r.rhs > 0) worst = std::max(worst, r.lhs / r.rhs);
    }
    return {eq <= 1e-12 && worst <= 1.0,
            fmt("indicator equality error %.1e <= 1e-12", eq) +
                fmt(", max int g^2 / (K2 |g|_{2,1} |g|_{2,inf}) = %.3f <= 1 on 1e3 slices (K2 = 2)", worst)};
}

Outcome quantization(const std::string& data_dir) {
    std::string detail;
    bool ok = true;
    for (const std::string name : {"two_bubble", "three_bubble"}) {
        auto t0 = Clock::now();
        Manifest m = load_manifest(data_dir + "/" + name + ".json");
        ConcentratingSequence seq(m.spec);
        auto [tree, rep] = quantize(seq);
        double dt = seconds_since(t0);
        double th = rep.theta;
        bool count = tree.bubble_count() == m.spec.bubbles.size();
        bool gap = rep.quantization_gap() <= 0.02 * th;
        bool res = rep.residual_neck_energy <= 0.05 * th;
        bool mono = rep.residual_nonincreasing;
        ok = ok && count && gap && res && mono && dt < 300 && tree.level == 12;
        detail += name + ": bubbles " + std::to_string(tree.bubble_count()) + "/" + std::to_string(m.spec.bubbles.size()) +
                  fmt(", gap %.2f%%", 100 * rep.quantization_gap() / th) +
                  fmt(" <= 2%%, residual %.2f%%", 100 * rep.residual_neck_energy / th) + " <= 5%, " +
                  (mono ? "non-increasing" : "INCREASING") + fmt(", %.0f s; ", dt);
    }
    return {ok, detail};
}

Outcome structure_calibration() {
    std::mt19937_64 rng(404);
    std::normal_distribution<double> N(0, 1);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        SphereStructure s = SphereStructure::normalized(N(rng), N(rng), N(rng));
        Eigen::Vector4d e(N(rng), N(rng), N(rng), N(rng));
        e.normalize();
        int n = 1 + trial % 2;
        Eigen::VectorXd t1(4 * n);
        for (int k = 0; k < 4 * n; ++k) t1(k) = N(rng);
        Eigen::Vector4d qe = left_matrix({0, s.a, s.b, s.c}) * e;
        Eigen::VectorXd t2 = -StructureTriple(n).combination(s) * t1;
        Eigen::MatrixXd du = t1 * e.transpose() + t2 * qe.transpose();
        SphereStructure got = bubble_structure(du).structure;
        // recovered up to the global sign fixed by the canonical choice
        double dp = std::max({std::abs(got.a - s.a), std::abs(got.b - s.b), std::abs(got.c - s.c)});
        double dm = std::max({std::abs(got.a + s.a), std::abs(got.b + s.b), std::abs(got.c + s.c)});
        worst = std::max(worst, std::min(dp, dm));
    }
    double lo = 1e9, zero = 0;
    for (int trial = 0; trial < 100000; ++trial) {
        int n = 1 + trial % 2;
        SphereStructure s = SphereStructure::normalized(N(rng), N(rng), N(rng));
        Eigen::VectorXd e1(4 * n), e2(4 * n);
        for (int k = 0; k < 4 * n; ++k) {
            e1(k) = N(rng);
            e2(k) = N(rng);
        }
        e1.normalize();
        e2 -= e2.dot(e1) * e1;
        e2.normalize();
        lo = std::min(lo, calibration_defect(e1, e2, s));
        if (trial % 100 == 0) {
            Eigen::VectorXd Se = StructureTriple(n).combination(s) * e1;
            zero = std::max(zero, std::abs(calibration_defect(e1, Se, s)));
        }
    }
    bool ok = worst <= 1e-8 && lo >= -1e-12 && zero < 1e-12;
    return {ok, fmt("structure error %.1e <= 1e-8 on 1e3 jets", worst) +
                    fmt(", min defect %.2e >= -1e-12 on 1e5 planes", lo) +
                    fmt(", holomorphic planes %.1e", zero)};
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

Outcome cli_determinism(const std::string& cli, const std::string& data_dir) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / ("fueterlab_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    {
        std::ofstream(dir / "w21.json") << R"({"grid": 16, "suite": false})";
    }
    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"identity", "identity-check --seed 5"},
        {"monotonicity", "monotonicity --grid 16"},
        {"norms", "norms --seed 5"},
        {"w21", "solve-w21 --config " + (dir / "w21.json").string()},
        {"bubbles", "extract-bubbles " + data_dir + "/two_bubble.json --seed 7"},
    };
    std::string detail;
    bool ok = true;
    for (const auto& [tag, args] : cmds) {
        std::string out[2];
        for (int rep = 0; rep < 2; ++rep) {
            fs::path p = dir / (tag + std::to_string(rep));
            // the second run changes the worker count, which must not show in the report
            std::string env = rep ? "FUETERLAB_THREADS=1 " : "FUETERLAB_THREADS=3 ";
            std::string cmd = env + "\"" + cli + "\" " + args + " --out " + p.string() + " >/dev/null 2>&1";
            int rc = std::system(cmd.c_str());
            if (rc != 0) {
                ok = false;
                detail += tag + " exit " + std::to_string(rc) + "; ";
            }
            out[rep] = slurp(p.string());
        }
        bool same = !out[0].empty() && out[0] == out[1];
        ok = ok && same;
        detail += tag + (same ? " identical (" + std::to_string(out[0].size()) + " B); " : " DIFFERS; ");
    }
    fs::remove_all(dir);
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli = argc > 1 ? argv[1] : FUETERLAB_CLI_PATH;
    std::string data = argc > 2 ? argv[2] : FUETERLAB_DATA_DIR;
    run(1, "energy identity", energy_identity);
    run(2, "linear triholomorphic kernel", linear_kernel);
    run(3, "flat monotonicity", flat_monotonicity);
    run(4, "Jacobian-form Laplacian", jacobian_laplacian);
    run(5, "radial scaling identities", radial_scaling);
    run(6, "fixed-point scheme", fixed_point);
    run(7, "W^{2,1} regression", w21_regression);
    run(8, "maximal function weak-L1", maximal_weak_l1);
    run(9, "Lorentz machinery", lorentz);
    run(10, "quantization pipeline", [&] { return quantization(data); });
    run(11, "structure recovery and calibration", structure_calibration);
    run(12, "CLI determinism", [&] { return cli_determinism(cli, data); });
    std::printf("%d of 12 criteria failed\n", failures);
    return failures ? 1 : 0;
}
