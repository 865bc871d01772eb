// fueterlab: batch front end.
//
// Exit codes: 0 success, 1 a check failed or a diagnostic was raised,
// 2 bad usage, config or input.

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fueterlab/bubbletree.hpp"
#include "fueterlab/fields.hpp"
#include "fueterlab/grid.hpp"
#include "fueterlab/manifest.hpp"
#include "fueterlab/monotone.hpp"
#include "fueterlab/norms.hpp"
#include "fueterlab/poisson.hpp"
#include "fueterlab/suite.hpp"

using namespace fueterlab;

namespace {

constexpr const char* kReportFormat = "fueterlab-report/1";
constexpr const char* kConfigFormat = "fueterlab-config/1";

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path, out_path, field_path, manifest_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> grid;
    std::optional<int> m;
};

// Reads keys from the user config, remembering which were used.
class Options {
public:
    explicit Options(json j) : j_(std::move(j)) {
        if (!j_.is_object()) throw InputError("config must be a JSON object");
        if (j_.contains("format")) {
            if (j_["format"] != kConfigFormat) throw InputError("config: unknown format tag");
            used_.insert("format");
        }
    }

    template <class T>
    T get(const std::string& key, T def) {
        used_.insert(key);
        if (!j_.contains(key)) return def;
        try {
            return j_[key].get<T>();
        } catch (const json::exception&) {
            throw InputError("config: bad value for '" + key + "'");
        }
    }
    json take(const std::string& key) {
        used_.insert(key);
        return j_.contains(key) ? j_[key] : json();
    }
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw InputError("config: unknown key '" + it.key() + "'");
    }

private:
    json j_;
    std::set<std::string> used_;
};

json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
}

Options load_options(const Common& c) {
    return Options(c.config_path.empty() ? json::object() : read_json_file(c.config_path));
}

GridField load_field(const std::string& path) {
    try {
        return read_fld1(path);
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
}

void positive(double v, const char* what) {
    if (!(v > 0)) throw InputError(std::string("config: ") + what + " must be positive");
}

json envelope(const std::string& command, const json& config) {
    json r;
    r["format"] = kReportFormat;
    r["command"] = command;
    r["config"] = config;
    return r;
}

void emit(const Common& c, const std::string& text) {
    if (c.out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream os(c.out_path, std::ios::binary);
    if (!os) throw InputError("cannot write " + c.out_path);
    os << text;
}

void emit(const Common& c, const json& j) { emit(c, j.dump(2) + "\n"); }

// ---- identity-check ---------------------------------------------------------

int cmd_identity_check(const Common& c) {
    Options o = load_options(c);
    int m = c.m.value_or(o.get("m", 1));
    int n = o.get("n", 1);
    double tol = o.get("tol", 1e-10);
    int jets = o.get("jets", m == 1 ? 10000 : 1000);
    std::uint64_t seed = c.seed.value_or(o.get<std::uint64_t>("seed", 1));
    o.finish();
    if (m < 1 || m > 2 || n < 1 || n > 2) throw InputError("config: m and n must be 1 or 2");
    if (!(tol >= 0)) throw InputError("config: tol must be >= 0");
    if (jets < 1) throw InputError("config: jets must be >= 1");

    std::optional<GridField> field;
    if (!c.field_path.empty()) {
        field = load_field(c.field_path);
        m = field->grid().m;
        n = field->grid().n;
    }
    json cfg = {{"m", m}, {"n", n}, {"tol", tol}, {"jets", jets}, {"seed", seed}};
    if (field) cfg["field"] = c.field_path;

    StructureTriple dom(m), tar(n);
    EnergyIdentity E(dom, tar);
    double worst = 0;
    long tested = 0;
    if (field) {
        const Grid& g = field->grid();
        int idx[16];
        for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
            g.unravel(lin, idx);
            if (!g.interior(idx, 1)) continue;
            worst = std::max(worst, std::abs(E.defect(differential(*field, lin))));
            ++tested;
        }
    } else {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> N(0, 1);
        Jet dv(4 * n, 4 * m);
        for (int t = 0; t < jets; ++t) {
            for (Eigen::Index i = 0; i < dv.size(); ++i) dv.data()[i] = N(rng);
            worst = std::max(worst, std::abs(E.defect(dv)));
            ++tested;
        }
    }
    json r = envelope("identity-check", cfg);
    r["max_defect"] = worst;
    r["jets_tested"] = tested;
    r["kernel_dim"] = triholo_kernel(dom, tar).size();
    bool ok = worst < tol;
    r["pass"] = ok;
    emit(c, r);
    return ok ? 0 : 1;
}

// ---- monotonicity -----------------------------------------------------------

int cmd_monotonicity(const Common& c) {
    Options o = load_options(c);
    int m = c.m.value_or(o.get("m", 1));
    int grid = c.grid.value_or(o.get("grid", 32));
    std::string name = o.get<std::string>("field", "reference_quartic");
    double L = o.get("L", 0.5);
    auto radii = o.get<std::vector<double>>("radii", {0.1, 0.2, 0.3, 0.4});
    auto center = o.get<std::vector<double>>("center", {});
    o.finish();
    if (m < 1 || m > 2) throw InputError("config: m must be 1 or 2");
    if (grid < 4) throw InputError("config: grid must be >= 4");
    positive(L, "L");

    json cfg;
    std::optional<GridField> stored;
    std::optional<HolomorphicField> holo;
    Grid g;
    if (!c.field_path.empty()) {
        stored = load_field(c.field_path);
        g = stored->grid();
        cfg["field_file"] = c.field_path;
    } else {
        g = Grid::box(m, 1, L, L / grid);
        if (name != "constant") {
            for (auto& nf : triholomorphic_suite(m, 1))
                if (nf.name == name) holo = nf.field;
            if (!holo) throw InputError("config: unknown field '" + name + "'");
        }
        cfg["field"] = name;
        cfg["grid"] = grid;
        cfg["L"] = L;
    }
    cfg["m"] = g.m;
    if (center.empty()) center.assign(g.dim(), 0.0);
    if (static_cast<int>(center.size()) != g.dim()) throw InputError("config: center needs 4m entries");
    cfg["center"] = center;
    cfg["radii"] = radii;

    RatioProfile p;
    try {
        if (stored) {
            p = ratio_profile(*stored, center.data(), radii);
        } else if (holo) {
            FunctionField u(g, *holo);
            p = ratio_profile(u, center.data(), radii);
        } else {
            const int C = g.components();
            FunctionField u(g, [C](const double*, double* out) { std::fill(out, out + C, 1.0); });
            p = ratio_profile(u, center.data(), radii);
        }
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    std::ostringstream os;
    os << "# format=" << kReportFormat << " command=monotonicity\n";
    os << "# config=" << cfg.dump() << "\n";
    p.write_csv(os);
    emit(c, os.str());
    return 0;
}

// ---- norms ------------------------------------------------------------------

int cmd_norms(const Common& c) {
    Options o = load_options(c);
    int d = o.get("d", 2);
    int grid = c.grid.value_or(o.get("grid", 64));
    std::uint64_t seed = c.seed.value_or(o.get<std::uint64_t>("seed", 1));
    auto lambdas = o.get<std::vector<double>>("lambdas", {0.25, 0.5, 1.0, 2.0, 4.0});
    o.finish();
    for (double l : lambdas) positive(l, "lambdas");

    json cfg;
    ScalarGrid f;
    if (!c.field_path.empty()) {
        GridField u = load_field(c.field_path);
        const Grid& g = u.grid();
        f = ScalarGrid(g.dims, g.h);
        const int C = g.components();
        for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
            double s = 0;
            for (int k = 0; k < C; ++k) s += u.at(lin)[k] * u.at(lin)[k];
            f.v[lin] = std::sqrt(s);
        }
        cfg["field_file"] = c.field_path;
        cfg["field"] = "pointwise norm";
    } else {
        if (d < 1 || d > 4) throw InputError("config: d must be in 1..4");
        if (grid < 4) throw InputError("config: grid must be >= 4");
        f = ScalarGrid::cube(d, grid, 1.0 / grid);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> U(-1.0, 1.0);
        std::bernoulli_distribution sparse(0.2);
        for (double& x : f.v) x = sparse(rng) ? 5 * U(rng) : U(rng);
        cfg["field"] = "random";
        cfg["d"] = d;
        cfg["grid"] = grid;
        cfg["seed"] = seed;
    }
    cfg["lambdas"] = lambdas;

    json r = envelope("norms", cfg);
    ScalarGrid Mf = hl_maximal(f);
    r["l1"] = f.l1();
    r["l2"] = f.l2();
    r["sup"] = f.sup();
    bool ok = true;
    json wk = json::array();
    for (double l : lambdas) {
        WeakL1 w = weak_l1_check(f, l, &Mf);
        ok = ok && w.holds();
        wk.push_back({{"lambda", l}, {"measure", w.measure}, {"bound", w.bound}, {"holds", w.holds()}});
    }
    r["weak_l1"] = wk;
    r["h1"] = h1_norm(f);
    r["bmo"] = bmo_norm(f);
    r["lorentz_21"] = lorentz_21(f);
    r["lorentz_2inf"] = lorentz_2inf(f);
    InterpolationCheck ic = interpolation_sides(f);
    r["interpolation"] = {{"lhs", ic.lhs}, {"rhs", ic.rhs}, {"constant", kInterpolationConstant},
                          {"holds", ic.holds()}};
    ok = ok && ic.holds();
    r["pass"] = ok;
    if (!ok) r["reason"] = "inequality-violated";
    emit(c, r);
    return ok ? 0 : 1;
}

// ---- solve-w21 --------------------------------------------------------------

int cmd_solve_w21(const Common& c) {
    Options o = load_options(c);
    ProblemSpec s;
    s.d = o.get("d", 4);
    s.n = c.grid.value_or(o.get("grid", 40));
    s.L = o.get("L", s.L);
    s.inner = o.get("inner", s.inner);
    s.outer = o.get("outer", s.outer);
    s.magnitude = o.get("magnitude", s.magnitude);
    double rho = o.get("rho", 0.5);
    double tol = o.get("tol", 1e-12);
    int max_iter = o.get("max_iter", 200);
    bool suite = o.get("suite", true);
    o.finish();
    if (c.m && *c.m != 1) throw InputError("solve-w21: only m = 1 is supported");
    positive(rho, "rho");
    positive(tol, "tol");
    if (max_iter < 1) throw InputError("config: max_iter must be >= 1");

    PerturbedProblem P;
    ScalarGrid w_star;
    try {
        P = make_problem(s);
        w_star = odd_bump(P.chi.dims, P.chi.h, rho);
        P.f = manufactured_source(P, w_star);
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    json cfg = {{"d", s.d}, {"grid", s.n}, {"L", s.L}, {"inner", s.inner}, {"outer", s.outer},
                {"magnitude", s.magnitude}, {"rho", rho}, {"tol", tol}, {"max_iter", max_iter},
                {"suite", suite}};
    json r = envelope("solve-w21", cfg);

    FixedPointResult fp = fixed_point_solve(P, tol, max_iter);
    double err = 0;
    for (std::size_t i = 0; i < fp.v.size(); ++i) err = std::max(err, std::abs(fp.v.v[i] - w_star.v[i]));
    auto sz = P.sizes();
    r["solver"] = {{"converged", fp.converged},
                   {"iterations", fp.iterations},
                   {"contraction", fp.contraction},
                   {"residual", fp.residual},
                   {"relative_error", err / w_star.sup()},
                   {"diagnostic", fp.diagnostic},
                   {"coefficient_size", sz.coefficients()},
                   {"grad_chi", sz.grad_chi},
                   {"hess_chi", sz.hess_chi}};
    bool ok = fp.converged;
    std::string reason = fp.diagnostic;

    if (suite) {
        json rows = json::array();
        double worst = 0;
        for (double L : {0.5, 1.0}) {
            Grid g = Grid::box(1, 1, L, L / 8);
            for (auto& nf : triholomorphic_suite(1, 1)) {
                FunctionField u(g, nf.field);
                double w21 = w21_norm(u), e = dirichlet_energy(u);
                double ratio = w21 / (1 + e);
                worst = std::max(worst, ratio);
                rows.push_back({{"field", nf.name}, {"L", L}, {"w21", w21}, {"energy", e}, {"ratio", ratio}});
            }
        }
        bool held = worst <= kW21Constant;
        r["w21"] = {{"constant", kW21Constant}, {"max_ratio", worst}, {"holds", held}, {"fields", rows}};
        if (!held) {
            ok = false;
            if (reason.empty()) reason = "w21-bound-violated";
        }
    }
    r["pass"] = ok;
    if (!ok) r["reason"] = reason;
    emit(c, r);
    return ok ? 0 : 1;
}

// ---- extract-bubbles --------------------------------------------------------

int cmd_extract_bubbles(const Common& c) {
    if (c.m && *c.m != 1) throw InputError("extract-bubbles: only m = 1 is supported");
    BubbleConfig cfg;
    Manifest man;
    try {
        if (!c.config_path.empty()) {
            json j = read_json_file(c.config_path);
            if (j.is_object() && j.contains("format")) {
                if (j["format"] != kConfigFormat) throw InputError("config: unknown format tag");
                j.erase("format");
            }
            cfg = bubble_config_from_json(j);
        }
        man = load_manifest(c.manifest_path);
    } catch (const InputError&) {
        throw;
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
    if (c.seed) man.spec.base_seed = *c.seed;
    std::optional<ConcentratingSequence> seq;
    try {
        seq.emplace(man.spec);
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }

    // threads only change scheduling, so they stay out of the report
    json cj = to_json(cfg);
    json r = envelope("extract-bubbles", cj);
    r["manifest"] = to_json(man.spec, man.energies);
    auto [tree, rep] = quantize(*seq, cfg);
    r["tree"] = to_json(tree);
    r["report"] = to_json(rep);
    if (!man.energies.empty()) {
        double s = 0;
        for (double e : man.energies) s += e;
        r["manifest_energy_sum"] = s;
    }
    bool ok = true;
    std::string reason;
    for (const auto& cl : rep.clusters)
        if (!cl.theta.reliable) {
            ok = false;
            reason = cl.theta.reason.empty() ? "unreliable-extrapolation" : cl.theta.reason;
        }
    r["pass"] = ok;
    if (!ok) r["reason"] = reason;
    emit(c, r);
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fueterlab batch front end"};
    app.require_subcommand(1);
    Common c;
    std::uint64_t seed = 0;
    int grid = 0, m = 0;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
        s->add_option("--out", c.out_path, "write the report here instead of stdout");
        s->add_option("--seed", seed, "RNG seed");
        s->add_option("--grid", grid, "grid nodes per axis");
        s->add_option("--m", m, "quaternionic domain dimension")->check(CLI::IsMember({1, 2}));
    };
    auto* id = app.add_subcommand("identity-check", "pointwise energy identity on random or field jets");
    auto* mono = app.add_subcommand("monotonicity", "energy ratio profile as CSV");
    auto* norms = app.add_subcommand("norms", "maximal function, Hardy, BMO and Lorentz norms");
    auto* w21 = app.add_subcommand("solve-w21", "fixed-point solve and W^{2,1} regression");
    auto* ex = app.add_subcommand("extract-bubbles", "bubble tree of a concentrating sequence");
    for (auto* s : {id, mono, norms, w21, ex}) add_common(s);
    for (auto* s : {id, mono, norms}) s->add_option("--field", c.field_path, "FLD1 field file");
    ex->add_option("manifest", c.manifest_path, "sequence manifest (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    auto given = [&](const char* flag) {
        auto* s = app.get_subcommands().front();
        return s->count(flag) > 0;
    };
    if (given("--seed")) c.seed = seed;
    if (given("--grid")) c.grid = grid;
    if (given("--m")) c.m = m;

    try {
        if (id->parsed()) return cmd_identity_check(c);
        if (mono->parsed()) return cmd_monotonicity(c);
        if (norms->parsed()) return cmd_norms(c);
        if (w21->parsed()) return cmd_solve_w21(c);
        if (ex->parsed()) return cmd_extract_bubbles(c);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        json r = {{"format", kReportFormat}, {"pass", false}, {"reason", "runtime-error"}, {"error", e.what()}};
        std::cout << r.dump(2) << "\n";
        return 1;
    }
    return 2;
}
