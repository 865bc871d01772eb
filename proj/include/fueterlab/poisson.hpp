#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <fftw3.h>

#include "fields.hpp"
#include "grid.hpp"
#include "norms.hpp"

namespace fueterlab {

// Periodic finite differences on a ScalarGrid read as a torus of side n_a h.
namespace periodic {

struct Walker {
    const ScalarGrid& g;
    std::vector<std::size_t> stride;
    explicit Walker(const ScalarGrid& g_) : g(g_), stride(g_.dim(), 1) {
        for (int a = g.dim() - 2; a >= 0; --a) stride[a] = stride[a + 1] * g.dims[a + 1];
    }
    std::size_t shift(std::size_t lin, const int* idx, int a, int s) const {
        int j = ((idx[a] + s) % g.dims[a] + g.dims[a]) % g.dims[a];
        return lin + (static_cast<long long>(j) - idx[a]) * static_cast<long long>(stride[a]);
    }
    double d1(const std::vector<double>& v, std::size_t lin, const int* idx, int a) const {
        return (v[shift(lin, idx, a, 1)] - v[shift(lin, idx, a, -1)]) / (2 * g.h);
    }
    double d2(const std::vector<double>& v, std::size_t lin, const int* idx, int a, int b) const {
        if (a == b) return (v[shift(lin, idx, a, 1)] - 2 * v[lin] + v[shift(lin, idx, a, -1)]) / (g.h * g.h);
        std::size_t p = shift(lin, idx, a, 1), m = shift(lin, idx, a, -1);
        int ip[16], im[16];
        for (int c = 0; c < g.dim(); ++c) ip[c] = im[c] = idx[c];
        ip[a] = (idx[a] + 1) % g.dims[a];
        im[a] = (idx[a] - 1 + g.dims[a]) % g.dims[a];
        double s = v[shift(p, ip, b, 1)] - v[shift(p, ip, b, -1)] - v[shift(m, im, b, 1)] + v[shift(m, im, b, -1)];
        return s / (4 * g.h * g.h);
    }
};

inline ScalarGrid laplacian(const ScalarGrid& f) {
    Walker w(f);
    ScalarGrid out = f;
    std::vector<int> idx(f.dim());
    for (std::size_t lin = 0; lin < f.size(); ++lin) {
        f.unravel(lin, idx.data());
        double s = 0;
        for (int a = 0; a < f.dim(); ++a) s += w.d2(f.v, lin, idx.data(), a, a);
        out.v[lin] = s;
    }
    return out;
}

// sum (|v| + |grad v|) h^d with central differences
inline double w11_norm(const ScalarGrid& v) {
    Walker w(v);
    std::vector<int> idx(v.dim());
    double s = 0;
    for (std::size_t lin = 0; lin < v.size(); ++lin) {
        v.unravel(lin, idx.data());
        double g2 = 0;
        for (int a = 0; a < v.dim(); ++a) {
            double d = w.d1(v.v, lin, idx.data(), a);
            g2 += d * d;
        }
        s += std::abs(v.v[lin]) + std::sqrt(g2);
    }
    return s * v.cell();
}

}  // namespace periodic

enum class Symbol { discrete, spectral };

// Inverse Laplacian on the torus with mean-zero projection. The discrete symbol
// inverts the 2nd-order periodic Laplacian exactly; the spectral symbol inverts
// -|k|^2 and is exact on trigonometric data.
class TorusPoisson {
public:
    TorusPoisson(const std::vector<int>& dims, double h, Symbol s = Symbol::discrete) : dims_(dims), h_(h) {
        int d = static_cast<int>(dims.size());
        n_ = 1;
        for (int x : dims) n_ *= x;
        nc_ = n_ / dims.back() * (dims.back() / 2 + 1);
        real_ = fftw_alloc_real(n_);
        spec_ = fftw_alloc_complex(nc_);
        fwd_ = fftw_plan_dft_r2c(d, dims_.data(), real_, spec_, FFTW_ESTIMATE);
        bwd_ = fftw_plan_dft_c2r(d, dims_.data(), spec_, real_, FFTW_ESTIMATE);
        inv_.assign(nc_, 0.0);
        std::vector<int> k(d, 0);
        int last = dims.back() / 2 + 1;
        for (std::size_t i = 0; i < nc_; ++i) {
            double lam = 0;
            for (int a = 0; a < d; ++a) {
                int ka = a == d - 1 ? k[a] : (k[a] <= dims[a] / 2 ? k[a] : k[a] - dims[a]);
                double th = 2 * M_PI * ka / dims[a];
                lam += s == Symbol::discrete ? (2 * std::cos(th) - 2) / (h * h) : -(th / h) * (th / h);
            }
            inv_[i] = i == 0 || lam == 0 ? 0.0 : 1.0 / lam;
            for (int a = d - 1; a >= 0; --a) {
                int top = a == d - 1 ? last : dims[a];
                if (++k[a] < top) break;
                k[a] = 0;
            }
        }
    }
    ~TorusPoisson() {
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
        fftw_free(real_);
        fftw_free(spec_);
    }
    TorusPoisson(const TorusPoisson&) = delete;
    TorusPoisson& operator=(const TorusPoisson&) = delete;

    ScalarGrid solve(const ScalarGrid& f) {
        if (f.dims != dims_ || f.h != h_) throw std::invalid_argument("TorusPoisson: grid mismatch");
        std::copy(f.v.begin(), f.v.end(), real_);
        fftw_execute(fwd_);
        for (std::size_t i = 0; i < nc_; ++i) {
            spec_[i][0] *= inv_[i] / n_;
            spec_[i][1] *= inv_[i] / n_;
        }
        fftw_execute(bwd_);
        ScalarGrid v = f;
        std::copy(real_, real_ + n_, v.v.begin());
        return v;
    }

private:
    std::vector<int> dims_;
    double h_;
    std::size_t n_ = 0, nc_ = 0;
    double* real_ = nullptr;
    fftw_complex* spec_ = nullptr;
    fftw_plan fwd_, bwd_;
    std::vector<double> inv_;
};

inline ScalarGrid poisson_solve(const ScalarGrid& f, Symbol s = Symbol::discrete) {
    TorusPoisson P(f.dims, f.h, s);
    return P.solve(f);
}

// Data of  Lap v = (Lap chi) w + grad chi . grad w - chi mu^{ij} D_ij w - chi tau^j D_j w + chi sqrt|g| f
// on a torus. Empty mu / tau mean zero coefficients.
struct PerturbedProblem {
    ScalarGrid chi, sqrt_g, f;
    std::vector<ScalarGrid> mu;   // d*d, row-major, symmetric
    std::vector<ScalarGrid> tau;  // d

    int dim() const { return chi.dim(); }

    void validate() const {
        auto same = [&](const ScalarGrid& g) {
            if (g.dims != chi.dims || g.h != chi.h) throw std::invalid_argument("PerturbedProblem: grid mismatch");
        };
        same(sqrt_g);
        same(f);
        int d = dim();
        if (!mu.empty()) {
            if (static_cast<int>(mu.size()) != d * d) throw std::invalid_argument("PerturbedProblem: mu needs d*d entries");
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) {
                    same(mu[i * d + j]);
                    if (mu[i * d + j].v != mu[j * d + i].v) throw std::invalid_argument("PerturbedProblem: mu not symmetric");
                }
        }
        if (!tau.empty()) {
            if (static_cast<int>(tau.size()) != d) throw std::invalid_argument("PerturbedProblem: tau needs d entries");
            for (const auto& t : tau) same(t);
        }
        for (const ScalarGrid* g : {&chi, &sqrt_g, &f})
            for (double x : g->v)
                if (!std::isfinite(x)) throw std::invalid_argument("PerturbedProblem: non-finite data");
    }

    // max norms of mu, tau, grad chi, Hess chi
    struct Sizes {
        double mu = 0, tau = 0, grad_chi = 0, hess_chi = 0;
        double coefficients() const { return std::max(mu, tau); }
    };
    Sizes sizes() const {
        Sizes s;
        for (const auto& m : mu) s.mu = std::max(s.mu, m.sup());
        for (const auto& t : tau) s.tau = std::max(s.tau, t.sup());
        periodic::Walker w(chi);
        std::vector<int> idx(dim());
        for (std::size_t lin = 0; lin < chi.size(); ++lin) {
            chi.unravel(lin, idx.data());
            double g2 = 0;
            for (int a = 0; a < dim(); ++a) {
                double d = w.d1(chi.v, lin, idx.data(), a);
                g2 += d * d;
                for (int b = 0; b < dim(); ++b)
                    s.hess_chi = std::max(s.hess_chi, std::abs(w.d2(chi.v, lin, idx.data(), a, b)));
            }
            s.grad_chi = std::max(s.grad_chi, std::sqrt(g2));
        }
        return s;
    }
};

// The right-hand side above evaluated at w (all derivatives central); with_source
// false drops the chi sqrt|g| f term.
inline ScalarGrid perturbed_rhs(const ScalarGrid& w, const PerturbedProblem& P, bool with_source = true) {
    const int d = P.dim();
    periodic::Walker wk(w);
    ScalarGrid lap_chi = periodic::laplacian(P.chi);
    ScalarGrid r = w;
    std::vector<int> idx(d);
    for (std::size_t lin = 0; lin < w.size(); ++lin) {
        w.unravel(lin, idx.data());
        const double chi = P.chi.v[lin];
        double s = lap_chi.v[lin] * w.v[lin];
        for (int a = 0; a < d; ++a) s += wk.d1(P.chi.v, lin, idx.data(), a) * wk.d1(w.v, lin, idx.data(), a);
        if (chi != 0) {
            double pert = 0;
            if (!P.mu.empty())
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j) {
                        double m = P.mu[i * d + j].v[lin];
                        if (m != 0) pert += m * wk.d2(w.v, lin, idx.data(), i, j);
                    }
            if (!P.tau.empty())
                for (int j = 0; j < d; ++j) pert += P.tau[j].v[lin] * wk.d1(w.v, lin, idx.data(), j);
            s -= chi * pert;
            if (with_source) s += chi * P.sqrt_g.v[lin] * P.f.v[lin];
        }
        r.v[lin] = s;
    }
    return r;
}

inline ScalarGrid contraction_step(const ScalarGrid& w, const PerturbedProblem& P, TorusPoisson& solver) {
    return solver.solve(perturbed_rhs(w, P));
}

inline ScalarGrid contraction_step(const ScalarGrid& w, const PerturbedProblem& P) {
    TorusPoisson solver(w.dims, w.h);
    return contraction_step(w, P, solver);
}

struct FixedPointResult {
    ScalarGrid v;
    int iterations = 0;
    double contraction = 0;  // geometric mean of the last (up to 4) ratios ||v_{k+1}-v_k|| / ||v_k-v_{k-1}||
    std::vector<double> increments;
    double residual = 0;  // ||v - T v||_{W^{1,1}}
    bool converged = false;
    std::string diagnostic;  // "non-contraction", "max-iterations" or empty
};

namespace detail {
inline double recent_rate(const std::vector<double>& inc) {
    std::size_t n = inc.size();
    if (n < 2) return 0;
    std::size_t k = std::min<std::size_t>(4, n - 1);
    if (inc[n - 1 - k] <= 0) return 0;
    return std::pow(inc[n - 1] / inc[n - 1 - k], 1.0 / k);
}
}  // namespace detail

inline FixedPointResult fixed_point_solve(const PerturbedProblem& P, double tol, int max_iter) {
    P.validate();
    if (!(tol > 0) || max_iter < 1) throw std::invalid_argument("fixed_point_solve: tol > 0, max_iter >= 1");
    TorusPoisson solver(P.chi.dims, P.chi.h);
    FixedPointResult res;
    ScalarGrid v = P.chi;
    std::fill(v.v.begin(), v.v.end(), 0.0);
    int above = 0;
    for (int k = 1; k <= max_iter; ++k) {
        ScalarGrid next = contraction_step(v, P, solver);
        ScalarGrid diff = next;
        for (std::size_t i = 0; i < diff.size(); ++i) diff.v[i] -= v.v[i];
        double inc = periodic::w11_norm(diff);
        if (!res.increments.empty() && res.increments.back() > 0) {
            double ratio = inc / res.increments.back();
            above = ratio >= 1 ? above + 1 : 0;
        }
        res.increments.push_back(inc);
        res.contraction = detail::recent_rate(res.increments);
        v = std::move(next);
        res.iterations = k;
        if (inc < tol) {
            res.converged = true;
            break;
        }
        if (above >= 3 || !std::isfinite(inc)) {
            res.diagnostic = "non-contraction";
            break;
        }
    }
    if (!res.converged && res.diagnostic.empty()) res.diagnostic = "max-iterations";
    ScalarGrid tv = contraction_step(v, P, solver);
    for (std::size_t i = 0; i < tv.size(); ++i) tv.v[i] -= v.v[i];
    res.residual = periodic::w11_norm(tv);
    res.v = std::move(v);
    return res;
}

// Configurable family: torus [0, L)^d, chi a smooth bump equal to 1 on
// B_inner(c) and 0 outside B_outer(c); entries of mu and tau bounded by `magnitude`.
struct ProblemSpec {
    int d = 4;
    int n = 40;
    double L = 8;
    double inner = 0.125;
    double outer = 1.0;
    double magnitude = 0.05;
};

namespace detail {
inline double smooth_step(double s) {  // 1 for s <= 0, 0 for s >= 1, C-infinity
    auto psi = [](double t) { return t > 0 ? std::exp(-1 / t) : 0.0; };
    if (s <= 0) return 1;
    if (s >= 1) return 0;
    return psi(1 - s) / (psi(1 - s) + psi(s));
}
}  // namespace detail

inline PerturbedProblem make_problem(const ProblemSpec& s) {
    if (s.d < 1 || s.n < 4 || !(s.L > 0) || !(s.inner > 0) || !(s.outer > s.inner) || !(s.magnitude >= 0))
        throw std::invalid_argument("ProblemSpec: invalid parameters");
    if (2 * s.outer * 4 > s.L * (1 + 1e-12))
        throw std::invalid_argument("ProblemSpec: torus must be 4x the cutoff support");
    std::vector<int> dims(s.d, s.n);
    double h = s.L / s.n, c = s.L / 2;
    auto radius = [&](const double* x) {
        double r2 = 0;
        for (int a = 0; a < s.d; ++a) r2 += (x[a] - c) * (x[a] - c);
        return std::sqrt(r2);
    };
    PerturbedProblem P;
    P.chi = ScalarGrid::sample(dims, h, [&](const double* x) {
        return detail::smooth_step((radius(x) - s.inner) / (s.outer - s.inner));
    });
    auto bump = [&](const double* x) { return 0.5 * (1 + std::cos(2 * M_PI * (x[0] - c) / s.L)); };
    P.sqrt_g = ScalarGrid::sample(dims, h, [&](const double* x) { return 1 + 0.5 * s.magnitude * bump(x); });
    P.f = ScalarGrid(dims, h);
    if (s.magnitude > 0) {
        for (int i = 0; i < s.d; ++i)
            for (int j = 0; j < s.d; ++j) {
                double m = std::cos(1.0 + i + j + i * j);
                P.mu.push_back(ScalarGrid::sample(dims, h, [&](const double* x) { return s.magnitude * m * bump(x); }));
            }
        for (int j = 0; j < s.d; ++j)
            P.tau.push_back(ScalarGrid::sample(dims, h, [&](const double* x) {
                return s.magnitude * std::sin(2 * M_PI * x[j] / s.L + j);
            }));
    }
    return P;
}

// Source f for which w_star is the exact discrete fixed point. w_star must have
// zero mean, and chi sqrt|g| must be nonzero wherever the source is needed.
inline ScalarGrid manufactured_source(const PerturbedProblem& P, const ScalarGrid& w_star) {
    ScalarGrid need = periodic::laplacian(w_star);
    ScalarGrid rest = perturbed_rhs(w_star, P, false);
    ScalarGrid f = need;
    for (std::size_t i = 0; i < f.size(); ++i) {
        double r = need.v[i] - rest.v[i];
        double a = P.chi.v[i] * P.sqrt_g.v[i];
        if (std::abs(r) < 1e-14 * (1 + std::abs(need.v[i]))) {
            f.v[i] = 0;
            continue;
        }
        if (std::abs(a) < 1e-12) throw std::invalid_argument("manufactured_source: source needed where chi vanishes");
        f.v[i] = r / a;
    }
    return f;
}

// Odd compactly supported bump (x_0 - c) (1 - |x-c|^2/rho^2)^4 centred on the torus.
inline ScalarGrid odd_bump(const std::vector<int>& dims, double h, double rho) {
    double c = dims[0] * h / 2;
    return ScalarGrid::sample(dims, h, [&](const double* x) {
        double r2 = 0;
        for (std::size_t a = 0; a < dims.size(); ++a) r2 += (x[a] - c) * (x[a] - c);
        double t = 1 - r2 / (rho * rho);
        return t > 0 ? (x[0] - c) * t * t * t * t : 0.0;
    });
}

// Frozen over triholomorphic_suite on boxes L in {0.5, 1}, h = L/8, m = 1 (max ratio 3.05).
inline constexpr double kW21Constant = 4.0;

// sum over nodes with a full stencil of (|u| + |du| + |D^2 u|) h^{4m}
template <class Fld>
double w21_norm(const Fld& u) {
    const Grid& g = u.grid();
    const int D = g.dim(), C = g.components();
    int idx[16];
    double c0[32], a1[32], a2[32], a3[32], a4[32];
    double s = 0;
    const double h2 = g.h * g.h;
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (!g.interior(idx, 1)) continue;
        u.value(lin, c0);
        double v2 = 0, d1 = 0, d2 = 0;
        for (int c = 0; c < C; ++c) v2 += c0[c] * c0[c];
        for (int a = 0; a < D; ++a) {
            std::size_t p = static_cast<std::size_t>(g.shift(lin, idx, a, 1));
            std::size_t m = static_cast<std::size_t>(g.shift(lin, idx, a, -1));
            u.value(p, a1);
            u.value(m, a2);
            for (int c = 0; c < C; ++c) {
                double d = (a1[c] - a2[c]) / (2 * g.h);
                double dd = (a1[c] - 2 * c0[c] + a2[c]) / h2;
                d1 += d * d;
                d2 += dd * dd;
            }
            int ip[16];
            std::copy(idx, idx + D, ip);
            for (int b = a + 1; b < D; ++b) {
                ip[a] = idx[a] + 1;
                u.value(static_cast<std::size_t>(g.shift(p, ip, b, 1)), a1);
                u.value(static_cast<std::size_t>(g.shift(p, ip, b, -1)), a2);
                ip[a] = idx[a] - 1;
                u.value(static_cast<std::size_t>(g.shift(m, ip, b, 1)), a3);
                u.value(static_cast<std::size_t>(g.shift(m, ip, b, -1)), a4);
                ip[a] = idx[a];
                for (int c = 0; c < C; ++c) {
                    double dd = (a1[c] - a2[c] - a3[c] + a4[c]) / (4 * h2);
                    d2 += 2 * dd * dd;  // D_ab and D_ba
                }
            }
        }
        s += std::sqrt(v2) + std::sqrt(d1) + std::sqrt(d2);
    }
    return s * g.cell_volume();
}

}  // namespace fueterlab
