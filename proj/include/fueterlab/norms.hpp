#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <fftw3.h>

namespace fueterlab {

// Real values on nodes x = i*h of [0, n_a h)^d, each node carrying a cell of measure h^d.
struct ScalarGrid {
    std::vector<int> dims;
    double h = 1;
    std::vector<double> v;

    ScalarGrid() = default;
    ScalarGrid(std::vector<int> dims_, double h_) : dims(std::move(dims_)), h(h_) {
        if (dims.empty() || !(h > 0)) throw std::invalid_argument("ScalarGrid: bad shape");
        std::size_t n = 1;
        for (int d : dims) {
            if (d < 1) throw std::invalid_argument("ScalarGrid: bad shape");
            n *= static_cast<std::size_t>(d);
        }
        v.assign(n, 0.0);
    }
    static ScalarGrid cube(int d, int n, double h) { return ScalarGrid(std::vector<int>(d, n), h); }

    template <class F>
    static ScalarGrid sample(std::vector<int> dims, double h, F&& f) {
        ScalarGrid g(std::move(dims), h);
        std::vector<int> idx(g.dim());
        std::vector<double> x(g.dim());
        for (std::size_t lin = 0; lin < g.size(); ++lin) {
            g.unravel(lin, idx.data());
            for (int a = 0; a < g.dim(); ++a) x[a] = idx[a] * h;
            g.v[lin] = f(x.data());
        }
        return g;
    }

    int dim() const { return static_cast<int>(dims.size()); }
    std::size_t size() const { return v.size(); }
    double cell() const { return std::pow(h, dim()); }
    void unravel(std::size_t lin, int* idx) const {
        for (int a = dim() - 1; a >= 0; --a) {
            idx[a] = static_cast<int>(lin % dims[a]);
            lin /= dims[a];
        }
    }
    std::size_t ravel(const int* idx) const {
        std::size_t lin = 0;
        for (int a = 0; a < dim(); ++a) lin = lin * dims[a] + idx[a];
        return lin;
    }
    double l1() const {
        double s = 0;
        for (double x : v) s += std::abs(x);
        return s * cell();
    }
    double l2() const {
        double s = 0;
        for (double x : v) s += x * x;
        return std::sqrt(s * cell());
    }
    double sup() const {
        double s = 0;
        for (double x : v) s = std::max(s, std::abs(x));
        return s;
    }
};

namespace detail {

struct Offset {
    std::vector<int> k;
    long long r2;  // squared length in node units
};

// all integer offsets with |k| <= R, sorted by length
inline std::vector<Offset> ball_offsets(int d, int R) {
    std::vector<Offset> out;
    std::vector<int> k(d, -R);
    for (;;) {
        long long r2 = 0;
        for (int x : k) r2 += static_cast<long long>(x) * x;
        if (r2 <= static_cast<long long>(R) * R) out.push_back({k, r2});
        int a = d - 1;
        while (a >= 0 && k[a] == R) k[a--] = -R;
        if (a < 0) break;
        ++k[a];
    }
    std::stable_sort(out.begin(), out.end(), [](const Offset& a, const Offset& b) { return a.r2 < b.r2; });
    return out;
}

inline void check_same_shape(const ScalarGrid& a, const ScalarGrid& b) {
    if (a.dims != b.dims || a.h != b.h) throw std::invalid_argument("grids differ in shape");
}

}  // namespace detail

// Mf(x) = max over r in {h, 2h, ..., <= 1/2} of the average of |f| over the
// nodes of B_r(x) inside the grid (cell-center membership).
inline ScalarGrid hl_maximal(const ScalarGrid& f) {
    const int d = f.dim();
    const int R = std::max(1, static_cast<int>(std::floor(0.5 / f.h + 1e-9)));
    auto offs = detail::ball_offsets(d, R);
    ScalarGrid M = f;
    std::vector<int> idx(d), j(d);
    for (std::size_t lin = 0; lin < f.size(); ++lin) {
        f.unravel(lin, idx.data());
        double sum = 0, best = 0;
        long long count = 0;
        int next = 1;  // next radius (in nodes) at which to close a ball
        for (std::size_t o = 0; o <= offs.size(); ++o) {
            while (next <= R && (o == offs.size() || offs[o].r2 > static_cast<long long>(next) * next)) {
                if (count > 0) best = std::max(best, sum / count);
                ++next;
            }
            if (o == offs.size()) break;
            bool in = true;
            for (int a = 0; a < d && in; ++a) {
                j[a] = idx[a] + offs[o].k[a];
                in = j[a] >= 0 && j[a] < f.dims[a];
            }
            if (!in) continue;
            sum += std::abs(f.v[f.ravel(j.data())]);
            ++count;
        }
        M.v[lin] = best;
    }
    return M;
}

struct WeakL1 {
    double measure = 0;  // |{Mf > lambda}|
    double bound = 0;    // 5^d ||f||_1 / lambda
    bool holds() const { return measure <= bound; }
};

inline WeakL1 weak_l1_check(const ScalarGrid& f, double lambda, const ScalarGrid* Mf = nullptr) {
    if (!(lambda > 0)) throw std::invalid_argument("weak_l1_check: lambda must be positive");
    ScalarGrid local;
    if (!Mf) {
        local = hl_maximal(f);
        Mf = &local;
    }
    std::size_t cnt = 0;
    for (double x : Mf->v) cnt += x > lambda;
    return {cnt * f.cell(), std::pow(5.0, f.dim()) * f.l1() / lambda};
}

namespace detail {

// Linear convolution of grid data with a kernel sampled on integer offsets
// |k| <= R, through zero padding and FFTW.
class PaddedConvolver {
public:
    PaddedConvolver(const std::vector<int>& dims, int R) : dims_(dims) {
        int d = static_cast<int>(dims.size());
        pad_.resize(d);
        n_ = 1;
        for (int a = 0; a < d; ++a) {
            pad_[a] = dims[a] + std::min(R, dims[a] - 1) + 1;
            n_ *= static_cast<std::size_t>(pad_[a]);
        }
        nc_ = n_ / pad_[d - 1] * (pad_[d - 1] / 2 + 1);
        real_ = fftw_alloc_real(n_);
        spec_ = fftw_alloc_complex(nc_);
        kspec_ = fftw_alloc_complex(nc_);
        fwd_ = fftw_plan_dft_r2c(d, pad_.data(), real_, spec_, FFTW_ESTIMATE);
        bwd_ = fftw_plan_dft_c2r(d, pad_.data(), spec_, real_, FFTW_ESTIMATE);
    }
    ~PaddedConvolver() {
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
        fftw_free(real_);
        fftw_free(spec_);
        fftw_free(kspec_);
    }
    PaddedConvolver(const PaddedConvolver&) = delete;
    PaddedConvolver& operator=(const PaddedConvolver&) = delete;

    void set_data(const std::vector<double>& v) {
        std::fill(real_, real_ + n_, 0.0);
        std::vector<int> idx(dims_.size());
        for (std::size_t lin = 0; lin < v.size(); ++lin) {
            unravel(lin, idx.data());
            real_[padded(idx.data())] = v[lin];
        }
        fftw_execute(fwd_);
        data_spec_.assign(reinterpret_cast<double*>(spec_), reinterpret_cast<double*>(spec_) + 2 * nc_);
    }

    // out[x] = sum_k w(|k|^2) data[x - k] over integer offsets with |k| <= R;
    // offsets longer than the grid cannot reach a grid node and are dropped
    template <class W>
    void apply(int R, W&& w, std::vector<double>& out) {
        int d = static_cast<int>(dims_.size());
        std::vector<int> j(d, 0);
        long long R2 = static_cast<long long>(R) * R;
        for (std::size_t lin = 0; lin < n_; ++lin) {
            long long r2 = 0;
            bool in = true;
            for (int a = 0; a < d && in; ++a) {
                int reach = std::min(R, dims_[a] - 1);
                int k = j[a] <= reach ? j[a] : j[a] - pad_[a];
                r2 += static_cast<long long>(k) * k;
                in = std::abs(k) <= reach;
            }
            real_[lin] = in && r2 <= R2 ? w(r2) : 0.0;
            for (int a = d - 1; a >= 0; --a) {
                if (++j[a] < pad_[a]) break;
                j[a] = 0;
            }
        }
        fftw_execute_dft_r2c(fwd_, real_, kspec_);
        const double* ds = data_spec_.data();
        for (std::size_t i = 0; i < nc_; ++i) {
            double ar = ds[2 * i], ai = ds[2 * i + 1];
            double br = kspec_[i][0], bi = kspec_[i][1];
            spec_[i][0] = ar * br - ai * bi;
            spec_[i][1] = ar * bi + ai * br;
        }
        fftw_execute(bwd_);
        out.resize(size());
        std::vector<int> idx(d);
        for (std::size_t lin = 0; lin < out.size(); ++lin) {
            unravel(lin, idx.data());
            out[lin] = real_[padded(idx.data())] / static_cast<double>(n_);
        }
    }

private:
    std::size_t size() const {
        std::size_t s = 1;
        for (int d : dims_) s *= d;
        return s;
    }
    void unravel(std::size_t lin, int* idx) const {
        for (int a = static_cast<int>(dims_.size()) - 1; a >= 0; --a) {
            idx[a] = static_cast<int>(lin % dims_[a]);
            lin /= dims_[a];
        }
    }
    std::size_t padded(const int* idx) const {
        std::size_t lin = 0;
        for (std::size_t a = 0; a < pad_.size(); ++a) lin = lin * pad_[a] + idx[a];
        return lin;
    }

    std::vector<int> dims_, pad_;
    std::size_t n_ = 0, nc_ = 0;
    double* real_ = nullptr;
    fftw_complex* spec_ = nullptr;
    fftw_complex* kspec_ = nullptr;
    std::vector<double> data_spec_;
    fftw_plan fwd_, bwd_;
};

// number of integer points of Z^d with |k|^2 = s, for s <= R^2
inline std::vector<double> lattice_shell_counts(int d, int R) {
    std::size_t S = static_cast<std::size_t>(R) * R;
    std::vector<double> c(S + 1, 0.0);
    c[0] = 1;
    for (int a = 0; a < d; ++a) {
        std::vector<double> nc(S + 1, 0.0);
        for (std::size_t s = 0; s <= S; ++s) {
            if (c[s] == 0) continue;
            for (int k = -R; k <= R; ++k) {
                std::size_t t = s + static_cast<std::size_t>(k) * k;
                if (t <= S) nc[t] += c[s];
            }
        }
        c = std::move(nc);
    }
    return c;
}

inline std::vector<double> dyadic_times(double h) {
    std::vector<double> t;
    for (double s = h; s < 1 - 1e-12; s *= 2) t.push_back(s);
    return t;
}

}  // namespace detail

// sup_{0<t<1} |Phi_t * f| over dyadic t in {h, 2h, 4h, ...}; Phi_t is the
// Gaussian of width t cut off at |x| = 4t and renormalized to unit discrete mass.
// f is extended by zero outside the grid.
inline ScalarGrid truncated_maximal(const ScalarGrid& f) {
    auto ts = detail::dyadic_times(f.h);
    int Rmax = static_cast<int>(std::floor(4 * ts.back() / f.h + 1e-9));
    detail::PaddedConvolver conv(f.dims, Rmax);
    conv.set_data(f.v);
    ScalarGrid M = f;
    std::fill(M.v.begin(), M.v.end(), 0.0);
    std::vector<double> out;
    for (double t : ts) {
        int R = static_cast<int>(std::floor(4 * t / f.h + 1e-9));
        double c = -0.5 * f.h * f.h / (t * t);
        conv.apply(R, [c](long long r2) { return std::exp(c * r2); }, out);
        auto shells = detail::lattice_shell_counts(f.dim(), R);
        double mass = 0;
        for (std::size_t s2 = 0; s2 < shells.size(); ++s2) mass += shells[s2] * std::exp(c * s2);
        for (double& x : out) x /= mass;
        for (std::size_t i = 0; i < out.size(); ++i) M.v[i] = std::max(M.v[i], std::abs(out[i]));
    }
    return M;
}

// ||f||_{h^1}: L^1 norm over the grid of the truncated maximal function
inline double h1_norm(const ScalarGrid& f) {
    bool zero = std::all_of(f.v.begin(), f.v.end(), [](double x) { return x == 0.0; });
    if (zero) return 0;
    return truncated_maximal(f).l1();
}

// Mean oscillation over node cubes of k^d nodes, k dyadic, at every anchor;
// cubes of volume >= 1 (or the whole grid if none fit) contribute mean |f|.
inline double bmo_norm(const ScalarGrid& f) {
    const int d = f.dim();
    int nmin = *std::min_element(f.dims.begin(), f.dims.end());
    std::vector<int> sizes;
    for (int k = 1; k <= nmin; k *= 2) sizes.push_back(k);
    if (sizes.back() != nmin) sizes.push_back(nmin);
    bool have_large = false;
    for (int k : sizes) have_large = have_large || std::pow(k * f.h, d) >= 1 - 1e-12;

    double best = 0;
    std::vector<int> anchor(d), cube(d), idx(d);
    for (int k : sizes) {
        double vol = std::pow(k * f.h, d);
        bool small = vol <= 1 + 1e-12;
        bool large = have_large ? vol >= 1 - 1e-12 : k == sizes.back();
        if (!small && !large) continue;
        std::vector<int> span(d);
        for (int a = 0; a < d; ++a) span[a] = f.dims[a] - k + 1;
        std::fill(anchor.begin(), anchor.end(), 0);
        std::vector<double> vals;
        for (;;) {
            vals.clear();
            std::fill(cube.begin(), cube.end(), 0);
            for (;;) {
                for (int a = 0; a < d; ++a) idx[a] = anchor[a] + cube[a];
                vals.push_back(f.v[f.ravel(idx.data())]);
                int a = d - 1;
                while (a >= 0 && cube[a] == k - 1) cube[a--] = 0;
                if (a < 0) break;
                ++cube[a];
            }
            double mean = 0, mabs = 0;
            for (double x : vals) {
                mean += x;
                mabs += std::abs(x);
            }
            mean /= vals.size();
            mabs /= vals.size();
            if (small) {
                double osc = 0;
                for (double x : vals) osc += std::abs(x - mean);
                best = std::max(best, osc / vals.size());
            }
            if (large) best = std::max(best, mabs);
            int a = d - 1;
            while (a >= 0 && anchor[a] == span[a] - 1) anchor[a--] = 0;
            if (a < 0) break;
            ++anchor[a];
        }
    }
    return best;
}

struct PairingCheck {
    double pairing = 0;
    double bound = 0;
    bool holds() const { return pairing <= bound; }
};

// Frozen from the step-function x dipole family (see tests).
inline constexpr double kDualityConstant = 1.0;  // family max 0.68

inline PairingCheck duality_pairing_check(const ScalarGrid& f, const ScalarGrid& g,
                                          double K = kDualityConstant) {
    detail::check_same_shape(f, g);
    double s = 0;
    for (std::size_t i = 0; i < f.size(); ++i) s += f.v[i] * g.v[i];
    double h1 = h1_norm(g);
    return {std::abs(s) * f.cell(), h1 == 0 ? 0.0 : K * bmo_norm(f) * h1};
}

namespace detail {
inline std::vector<double> sorted_abs(const ScalarGrid& f) {
    std::vector<double> a(f.v.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(f.v[i]);
    std::sort(a.begin(), a.end(), std::greater<>());
    return a;
}
}  // namespace detail

// int_0^inf sqrt(|{|f| >= t}|) dt, exact for the piecewise-constant distribution function
inline double lorentz_21(const ScalarGrid& f) {
    auto a = detail::sorted_abs(f);
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        double next = k + 1 < a.size() ? a[k + 1] : 0.0;
        s += (a[k] - next) * std::sqrt((k + 1) * f.cell());
    }
    return s;
}

// sqrt(sup_t t^2 |{|f| >= t}|)
inline double lorentz_2inf(const ScalarGrid& f) {
    auto a = detail::sorted_abs(f);
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s = std::max(s, a[k] * a[k] * (k + 1) * f.cell());
    return std::sqrt(s);
}

// sup over step functions of ||g||_2^2 / (||g||_{2,1} ||g||_{2,inf}); the
// layer-cake bound t sqrt(mu(t)) <= ||g||_{2,inf} gives 2, approached by
// many-level staircases (see tests).
inline constexpr double kInterpolationConstant = 2.0;

struct InterpolationCheck {
    double lhs = 0;  // int g^2
    double rhs = 0;  // K2 ||g||_{2,1} ||g||_{2,inf}
    bool holds() const { return lhs <= rhs * (1 + 1e-12); }
};

inline InterpolationCheck interpolation_sides(const ScalarGrid& g, double K2 = kInterpolationConstant) {
    double l2 = g.l2();
    return {l2 * l2, K2 * lorentz_21(g) * lorentz_2inf(g)};
}

// |grad v| by central differences (one-sided on the edges), summed over components
inline ScalarGrid gradient_magnitude(const std::vector<ScalarGrid>& comps) {
    if (comps.empty()) throw std::invalid_argument("gradient_magnitude: no components");
    const ScalarGrid& g0 = comps[0];
    ScalarGrid out = g0;
    std::fill(out.v.begin(), out.v.end(), 0.0);
    std::vector<int> idx(g0.dim());
    for (const ScalarGrid& c : comps) {
        detail::check_same_shape(c, g0);
        for (std::size_t lin = 0; lin < c.size(); ++lin) {
            c.unravel(lin, idx.data());
            for (int a = 0; a < c.dim(); ++a) {
                if (c.dims[a] < 2) continue;
                int i = idx[a];
                int lo = std::max(i - 1, 0), hi = std::min(i + 1, c.dims[a] - 1);
                idx[a] = lo;
                double vl = c.v[c.ravel(idx.data())];
                idx[a] = hi;
                double vh = c.v[c.ravel(idx.data())];
                idx[a] = i;
                double dv = (vh - vl) / ((hi - lo) * c.h);
                out.v[lin] += dv * dv;
            }
        }
    }
    for (double& x : out.v) x = std::sqrt(x);
    return out;
}

inline InterpolationCheck lorentz_interpolation_check(const std::vector<ScalarGrid>& slice,
                                                      double K2 = kInterpolationConstant) {
    if (slice.empty() || slice[0].dim() != 2) throw std::invalid_argument("lorentz_interpolation_check: need a 2-D slice");
    return interpolation_sides(gradient_magnitude(slice), K2);
}

// Frozen from the seeded smooth-pair family (see tests).
inline constexpr double kJacobianConstant = 1.25;  // family max 0.87

struct JacobianBound {
    ScalarGrid jacobian;
    double h1 = 0;
    double bound = 0;  // C ||grad psi||_2 ||grad phi||_2
    bool holds() const { return h1 <= bound; }
};

// J = d1 psi d2 phi - d2 psi d1 phi on the first two axes (central, 0 on the edge)
inline JacobianBound jacobian_hardy_bound(const ScalarGrid& psi, const ScalarGrid& phi,
                                          double C = kJacobianConstant) {
    detail::check_same_shape(psi, phi);
    if (psi.dim() != 2 && psi.dim() != 4) throw std::invalid_argument("jacobian_hardy_bound: 2-D or 4-D grids");
    ScalarGrid J = psi;
    std::fill(J.v.begin(), J.v.end(), 0.0);
    std::vector<int> idx(psi.dim());
    auto d = [&](const ScalarGrid& f, int a) {
        int i = idx[a];
        idx[a] = i + 1;
        double p = f.v[f.ravel(idx.data())];
        idx[a] = i - 1;
        double q = f.v[f.ravel(idx.data())];
        idx[a] = i;
        return (p - q) / (2 * f.h);
    };
    for (std::size_t lin = 0; lin < psi.size(); ++lin) {
        psi.unravel(lin, idx.data());
        if (idx[0] == 0 || idx[1] == 0 || idx[0] == psi.dims[0] - 1 || idx[1] == psi.dims[1] - 1) continue;
        J.v[lin] = d(psi, 0) * d(phi, 1) - d(psi, 1) * d(phi, 0);
    }
    double h1 = h1_norm(J);
    double b = C * gradient_magnitude({psi}).l2() * gradient_magnitude({phi}).l2();
    return {std::move(J), h1, b};
}

}  // namespace fueterlab
