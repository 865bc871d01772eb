#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "exterior.hpp"
#include "fields.hpp"
#include "grid.hpp"
#include "quat.hpp"

namespace fueterlab {

// volume of the unit ball in R^k
inline double unit_ball_volume(int k) {
    return std::pow(std::numbers::pi, 0.5 * k) / std::tgamma(0.5 * k + 1);
}

namespace detail {

// Volume fraction of the cube [-h/2, h/2]^D centered at displacement d inside
// B_r(0), with the sphere replaced by a hyperplane normal to d. Uses the closed form for a cube cut by a half-space,
// vol{z in [0,1]^k : a.z <= b} = sum_v (-1)^|v| (b - a.v)_+^k / (k! prod a).
inline double cell_fraction(const double* d, double dist, double r, double h, int D) {
    double hd = 0.5 * h * std::sqrt(double(D));
    if (dist <= r - hd) return 1.0;
    if (dist >= r + hd) return 0.0;
    if (dist == 0) return 1.0;
    double a[16];
    int k = 0;
    double sum_a = 0;
    for (int i = 0; i < D; ++i) {
        double c = std::abs(d[i]) / dist;
        if (c < 1e-4) continue;
        a[k++] = c;
        sum_a += c;
    }
    // |d + y| <= r  <=>  n.y <= (r^2 - dist^2 - |y|^2) / (2 dist); |y|^2 replaced by its cell mean
    double cut = (r * r - dist * dist - D * h * h / 12.0) / (2 * dist);
    double b = cut / h + 0.5 * sum_a;
    if (b <= 0) return 0.0;
    if (b >= sum_a) return 1.0;
    double prod = 1;
    for (int i = 0; i < k; ++i) prod *= a[i];
    double s = 0;
    for (int v = 0; v < (1 << k); ++v) {
        double t = b;
        int bits = 0;
        for (int i = 0; i < k; ++i)
            if ((v >> i) & 1) {
                t -= a[i];
                ++bits;
            }
        if (t <= 0) continue;
        s += ((bits & 1) ? -1.0 : 1.0) * std::pow(t, k);
    }
    double f = s / (factorial(k) * prod);
    return std::clamp(f, 0.0, 1.0);
}

// Visits every node whose cell meets B_R(x): f(lin, d, dist), d = node - x.
// Throws when the ball comes within two nodes of a box face.
template <class F>
void visit_ball(const Grid& g, const double* x, double R, F&& f) {
    int D = g.dim();
    int lo[16], hi[16];
    for (int a = 0; a < D; ++a) {
        lo[a] = static_cast<int>(std::ceil((x[a] - R - 0.5 * g.h - g.origin()) / g.h - 1e-12));
        hi[a] = static_cast<int>(std::floor((x[a] + R + 0.5 * g.h - g.origin()) / g.h + 1e-12));
        if (g.domain == Domain::box) {
            if (lo[a] < 2 || hi[a] > g.dims[a] - 3)
                throw std::out_of_range("ball exits domain interior");
        } else if (hi[a] - lo[a] + 1 > g.dims[a]) {
            throw std::out_of_range("ball wraps around the torus");
        }
    }
    int idx[16], w[16];
    double d[16];
    for (int a = 0; a < D; ++a) idx[a] = lo[a];
    while (true) {
        std::size_t lin = 0;
        double d2 = 0;
        for (int a = 0; a < D; ++a) {
            d[a] = g.origin() + idx[a] * g.h - x[a];
            d2 += d[a] * d[a];
            w[a] = idx[a];
            if (g.domain == Domain::torus) w[a] = ((w[a] % g.dims[a]) + g.dims[a]) % g.dims[a];
            lin += static_cast<std::size_t>(w[a]) * g.strides[a];
        }
        f(lin, static_cast<const double*>(d), std::sqrt(d2));
        int a = D - 1;
        while (a >= 0 && idx[a] == hi[a]) {
            idx[a] = lo[a];
            --a;
        }
        if (a < 0) break;
        ++idx[a];
    }
}

// For each radius r_k: E_k = sum w_k |du|^2 h^D and T_k = sum w_k |du(d_r)|^2 / |y|^{D-2} h^D.
struct BallSums {
    std::vector<double> energy, radial;
};

template <class Fld>
BallSums ball_sums(const Fld& u, const double* x, const std::vector<double>& radii) {
    const Grid& g = u.grid();
    int D = g.dim();
    BallSums s{std::vector<double>(radii.size(), 0.0), std::vector<double>(radii.size(), 0.0)};
    if (radii.empty()) return s;
    double R = *std::max_element(radii.begin(), radii.end());
    double hd = 0.5 * g.h * std::sqrt(double(D));
    int C = g.components();
    int idx[16];
    double du[512];
    visit_ball(g, x, R, [&](std::size_t lin, const double* d, double dist) {
        if (dist >= R + hd) return;
        g.unravel(lin, idx);
        differential_into(u, lin, idx, du);
        double e = 0, rad = 0;
        for (int i = 0; i < C * D; ++i) e += du[i] * du[i];
        if (dist > 0) {
            for (int c = 0; c < C; ++c) {
                double v = 0;
                for (int a = 0; a < D; ++a) v += du[a * C + c] * d[a];
                rad += v * v;
            }
            rad /= std::pow(dist, D);
        }
        for (std::size_t k = 0; k < radii.size(); ++k) {
            double w = cell_fraction(d, dist, radii[k], g.h, D);
            if (w == 0) continue;
            s.energy[k] += w * e;
            s.radial[k] += w * rad;
        }
    });
    double cv = g.cell_volume();
    for (std::size_t k = 0; k < radii.size(); ++k) {
        s.energy[k] *= cv;
        s.radial[k] *= cv;
    }
    return s;
}

}  // namespace detail

// r^{2-4m} int_{B_r(x)} |du|^2 with cell-fraction weights
template <class Fld>
double energy_ratio(const Fld& u, const double* x, double r) {
    if (!(r > 0)) throw std::invalid_argument("energy_ratio: r must be positive");
    auto s = detail::ball_sums(u, x, {r});
    return std::pow(r, 2 - u.grid().dim()) * s.energy[0];
}

// int_{B_R \ B_s} |du(d_r)|^2 / |y - x|^{4m-2}
template <class Fld>
double radial_term(const Fld& u, const double* x, double s, double R) {
    if (!(s < R)) throw std::invalid_argument("radial_term: need s < R");
    if (s < 3 * u.grid().h) throw std::invalid_argument("radial_term: s below 3h");
    auto b = detail::ball_sums(u, x, {s, R});
    return b.radial[1] - b.radial[0];
}

// ratio(R) - ratio(s) - 2 radial_term(s, R); vanishes for stationary harmonic maps
template <class Fld>
double monotonicity_defect(const Fld& u, const double* x, double s, double R) {
    if (!(s < R)) throw std::invalid_argument("monotonicity_defect: need s < R");
    if (s < 3 * u.grid().h) throw std::invalid_argument("monotonicity_defect: s below 3h");
    auto b = detail::ball_sums(u, x, {s, R});
    int D = u.grid().dim();
    double ratio_s = std::pow(s, 2 - D) * b.energy[0];
    double ratio_R = std::pow(R, 2 - D) * b.energy[1];
    return ratio_R - ratio_s - 2 * (b.radial[1] - b.radial[0]);
}

struct RatioProfile {
    std::vector<double> center;
    std::vector<double> radii;
    std::vector<double> ratios;
    std::vector<double> radial_terms;  // over [r_{k-1}, r_k], 0 for the first radius
    std::vector<double> defects;       // ratio_k - ratio_{k-1} - 2 radial_k

    void write_csv(std::ostream& os) const {
        auto old = os.precision(17);
        os << "r,ratio,radial_term,defect\n";
        for (std::size_t k = 0; k < radii.size(); ++k)
            os << radii[k] << ',' << ratios[k] << ',' << radial_terms[k] << ',' << defects[k] << '\n';
        os.precision(old);
    }
};

template <class Fld>
RatioProfile ratio_profile(const Fld& u, const double* x, std::vector<double> radii) {
    if (radii.empty()) throw std::invalid_argument("ratio_profile: no radii");
    for (std::size_t k = 0; k < radii.size(); ++k) {
        if (!(radii[k] > 0)) throw std::invalid_argument("ratio_profile: radii must be positive");
        if (k && !(radii[k] > radii[k - 1]))
            throw std::invalid_argument("ratio_profile: radii must increase");
    }
    int D = u.grid().dim();
    auto b = detail::ball_sums(u, x, radii);
    RatioProfile p;
    p.center.assign(x, x + D);
    p.radii = radii;
    for (std::size_t k = 0; k < radii.size(); ++k) {
        p.ratios.push_back(std::pow(radii[k], 2 - D) * b.energy[k]);
        double rt = k ? b.radial[k] - b.radial[k - 1] : 0.0;
        p.radial_terms.push_back(rt);
        p.defects.push_back(k ? p.ratios[k] - p.ratios[k - 1] - 2 * rt : 0.0);
    }
    return p;
}

// Position-dependent structure forms omega_l(y), y the absolute position.
using FormField = std::function<std::array<KForm, 3>(const double* y)>;

// omega_l(y) = alpha_l + eps |y - c| P_l
inline FormField linear_perturbation(const StructureTriple& dom, std::array<KForm, 3> P, double eps,
                                     std::vector<double> c) {
    std::array<KForm, 3> alpha;
    for (int l = 0; l < 3; ++l) alpha[l] = kaehler_form(dom, static_cast<Unit>(l));
    return [alpha, P, eps, c](const double* y) {
        double r = 0;
        for (std::size_t a = 0; a < c.size(); ++a) r += (y[a] - c[a]) * (y[a] - c[a]);
        r = std::sqrt(r);
        std::array<KForm, 3> out;
        for (int l = 0; l < 3; ++l) out[l] = alpha[l] + (eps * r) * P[l];
        return out;
    };
}

// (1 + (4m-2) r) / r^{4m-2} int_{B_r} sum_l omega_l^{2m-1} ^ u*Omega_l. Nonpositive for
// flat triholomorphic maps; its negative is the monotone quantity.
template <class Fld>
double almost_monotone_quantity(const Fld& u, const double* x, double r, const FormField& forms,
                                const StructureTriple& tar) {
    const Grid& g = u.grid();
    int D = g.dim(), m = g.m;
    if (!(r > 0)) throw std::invalid_argument("almost_monotone_quantity: r must be positive");
    std::array<Eigen::MatrixXd, 3> W;
    for (int l = 0; l < 3; ++l) W[l] = tar.matrix(l);
    double sum = 0;
    double y[16];
    detail::visit_ball(g, x, r, [&](std::size_t lin, const double* d, double dist) {
        double w = detail::cell_fraction(d, dist, r, g.h, D);
        if (w == 0) return;
        Jet du = differential(u, lin);
        for (int a = 0; a < D; ++a) y[a] = x[a] + d[a];
        auto om = forms(y);
        double v = 0;
        for (int l = 0; l < 3; ++l) {
            KForm pw = wedge_power(om[l], 2 * m - 1);
            v += wedge(pw, two_form_from_matrix(du.transpose() * W[l] * du)).on_volume();
        }
        sum += w * v;
    });
    sum *= g.cell_volume();
    return (1 + (4 * m - 2) * r) / std::pow(r, 4 * m - 2) * sum;
}

struct DensityFit {
    double theta = 0;        // intercept / |B^{4m-2}|: density in units of 2-D energy
    double ratio_limit = 0;  // raw intercept of ratio(r) = ratio_limit + slope r
    double slope = 0;
    bool reliable = true;
    std::string reason;
    std::vector<double> radii, ratios;
};

// Least-squares affine fit on the given radii. A decrease of the ratio with r by
// more than tol * max|ratio| marks the fit unreliable.
inline DensityFit fit_density(const std::vector<double>& radii, const std::vector<double>& ratios,
                              int dim, double tol = 0.02) {
    if (radii.size() != ratios.size() || radii.size() < 2)
        throw std::invalid_argument("fit_density: need at least two samples");
    DensityFit f;
    f.radii = radii;
    f.ratios = ratios;
    double n = double(radii.size()), mr = 0, mq = 0;
    for (std::size_t k = 0; k < radii.size(); ++k) {
        mr += radii[k] / n;
        mq += ratios[k] / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t k = 0; k < radii.size(); ++k) {
        sxy += (radii[k] - mr) * (ratios[k] - mq);
        sxx += (radii[k] - mr) * (radii[k] - mr);
    }
    f.slope = sxy / sxx;
    f.ratio_limit = mq - f.slope * mr;
    f.theta = f.ratio_limit / unit_ball_volume(dim - 2);
    double scale = 0;
    for (double q : ratios) scale = std::max(scale, std::abs(q));
    for (std::size_t k = 1; k < radii.size(); ++k)
        if (ratios[k] < ratios[k - 1] - tol * scale - 1e-300) {
            f.reliable = false;
            f.reason = "unreliable-extrapolation";
        }
    return f;
}

// Density at x from the three smallest radii r >= 5h of the sweep {5h, 6h, 7h} * scale.
template <class Fld>
DensityFit density_estimate(const Fld& u, const double* x, double radius_scale = 1.0,
                            double tol = 0.02) {
    const Grid& g = u.grid();
    std::vector<double> radii = {5 * g.h * radius_scale, 6 * g.h * radius_scale,
                                 7 * g.h * radius_scale};
    if (radii[0] < 5 * g.h) throw std::invalid_argument("density_estimate: radii below 5h");
    auto b = detail::ball_sums(u, x, radii);
    std::vector<double> q;
    for (std::size_t k = 0; k < radii.size(); ++k) q.push_back(std::pow(radii[k], 2 - g.dim()) * b.energy[k]);
    return fit_density(radii, q, g.dim(), tol);
}

struct EpsRegularityReport {
    struct Center {
        std::vector<double> x;
        double ratio = 0;
        bool flagged = false;
        double sup_grad = 0;  // sup over B_{r/2} of |du|_F, flagged centers only
    };
    std::vector<Center> centers;
    double eps0 = 0, r = 0;
    double constant = 0;  // max over flagged centers of sup_grad * r / sqrt(eps0)
    std::size_t flagged = 0;
};

// Ratio test on a sublattice of centers (every `stride` nodes along each axis).
template <class Fld>
EpsRegularityReport eps_regularity_scan(const Fld& u, double eps0, double r, int stride = 1) {
    const Grid& g = u.grid();
    int D = g.dim();
    if (!(eps0 > 0) || !(r > 0) || stride < 1)
        throw std::invalid_argument("eps_regularity_scan: bad parameters");
    // |du| at every node where it is defined
    std::vector<double> grad(g.node_count(), -1.0);
    int idx[16];
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (g.interior(idx, 1)) grad[lin] = differential(u, lin).norm();
    }
    EpsRegularityReport rep;
    rep.eps0 = eps0;
    rep.r = r;
    double x[16];
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        bool on = true;
        for (int a = 0; a < D; ++a)
            if (idx[a] % stride) on = false;
        if (!on) continue;
        g.position(lin, x);
        double e = 0, sup = 0;
        try {
            detail::visit_ball(g, x, r, [&](std::size_t node, const double* d, double dist) {
                double w = detail::cell_fraction(d, dist, r, g.h, D);
                e += w * grad[node] * grad[node];
                if (dist <= 0.5 * r) sup = std::max(sup, grad[node]);
            });
        } catch (const std::out_of_range&) {
            continue;
        }
        EpsRegularityReport::Center c;
        c.x.assign(x, x + D);
        c.ratio = std::pow(r, 2 - D) * e * g.cell_volume();
        c.flagged = c.ratio < eps0;
        if (c.flagged) {
            c.sup_grad = sup;
            ++rep.flagged;
            rep.constant = std::max(rep.constant, sup * r / std::sqrt(eps0));
        }
        rep.centers.push_back(std::move(c));
    }
    return rep;
}

}  // namespace fueterlab
