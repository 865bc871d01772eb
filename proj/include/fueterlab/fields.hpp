#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "exterior.hpp"
#include "grid.hpp"
#include "quat.hpp"

namespace fueterlab {

using Jet = Eigen::MatrixXd;  // 4n x 4m

// Central-difference differential into a column-major 4n x 4m buffer.
// Fld provides grid() and value(lin, out).
template <class Fld>
void differential_into(const Fld& u, std::size_t lin, const int* idx, double* du) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    double up[32], dn[32];
    double inv = 1.0 / (2 * g.h);
    for (int a = 0; a < D; ++a) {
        long long p = g.shift(lin, idx, a, +1), q = g.shift(lin, idx, a, -1);
        if (p < 0 || q < 0) throw std::out_of_range("differential: boundary node");
        u.value(static_cast<std::size_t>(p), up);
        u.value(static_cast<std::size_t>(q), dn);
        for (int c = 0; c < C; ++c) du[a * C + c] = (up[c] - dn[c]) * inv;
    }
}

template <class Fld>
Jet differential(const Fld& u, std::size_t lin) {
    const Grid& g = u.grid();
    int idx[16];
    g.unravel(lin, idx);
    if (!g.interior(idx, 1)) throw std::out_of_range("differential: boundary node");
    Jet du(g.components(), g.dim());
    differential_into(u, lin, idx, du.data());
    return du;
}

// du - I du i - J du j - K du k - connection
inline Eigen::MatrixXd triholo_residual(const Jet& du, const StructureTriple& dom,
                                        const StructureTriple& tar,
                                        const std::optional<Eigen::MatrixXd>& connection = {}) {
    if (du.rows() != tar.real_dim() || du.cols() != dom.real_dim())
        throw std::invalid_argument("triholo_residual: dimension mismatch");
    Eigen::MatrixXd R = du;
    for (int u = 0; u < 3; ++u) R -= tar.matrix(u) * du * dom.matrix(u);
    if (connection) {
        if (connection->rows() != du.rows() || connection->cols() != du.cols())
            throw std::invalid_argument("triholo_residual: connection shape");
        R -= *connection;
    }
    return R;
}

// Linear map A -> A - sum S_tar A S_dom on 4n x 4m matrices, as a matrix
// acting on column-major vec(A).
inline Eigen::MatrixXd triholo_operator_matrix(const StructureTriple& dom,
                                               const StructureTriple& tar) {
    int r = tar.real_dim(), c = dom.real_dim();
    Eigen::MatrixXd M(r * c, r * c);
    for (int col = 0; col < r * c; ++col) {
        Eigen::MatrixXd E = Eigen::MatrixXd::Zero(r, c);
        E(col % r, col / r) = 1;
        Eigen::MatrixXd R = triholo_residual(E, dom, tar);
        M.col(col) = Eigen::Map<Eigen::VectorXd>(R.data(), r * c);
    }
    return M;
}

// Orthonormal basis of the linear triholomorphic maps, each returned as a jet.
inline std::vector<Jet> triholo_kernel(const StructureTriple& dom, const StructureTriple& tar,
                                       double rel_tol = 1e-10) {
    Eigen::MatrixXd M = triholo_operator_matrix(dom, tar);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    double smax = s.size() ? s[0] : 0;
    std::vector<Jet> basis;
    int r = tar.real_dim(), c = dom.real_dim();
    for (int i = 0; i < s.size(); ++i) {
        if (s[i] <= rel_tol * std::max(1.0, smax)) {
            Eigen::VectorXd v = svd.matrixV().col(i);
            basis.push_back(Eigen::Map<Eigen::MatrixXd>(v.data(), r, c));
        }
    }
    return basis;
}

// Pointwise energy identity. With LHS = -(1/(2m-1)!) sum_l alpha_l^{2m-1} ^ v*Omega_l
// on the unit volume, the exact algebraic identity under the left/left
// convention is LHS = |dv|^2/2 - |R|^2/8 with the Frobenius norm.
class EnergyIdentity {
public:
    EnergyIdentity(const StructureTriple& dom, const StructureTriple& tar)
        : dom_(dom), tar_(tar) {
        int m = dom.quaternionic_dim();
        for (int u = 0; u < 3; ++u) {
            powers_.push_back(wedge_power(kaehler_form(dom, static_cast<Unit>(u)), 2 * m - 1));
            omegas_.push_back(tar.matrix(u));
        }
        inv_fact_ = 1.0 / factorial(2 * m - 1);
    }

    double lhs(const Jet& dv) const {
        double s = 0;
        for (int u = 0; u < 3; ++u) {
            KForm pb = two_form_from_matrix(dv.transpose() * omegas_[u] * dv);
            s += wedge(powers_[u], pb).on_volume();
        }
        return -inv_fact_ * s;
    }
    double rhs(const Jet& dv) const {
        double r2 = triholo_residual(dv, dom_, tar_).squaredNorm();
        return 0.5 * dv.squaredNorm() - 0.125 * r2;
    }
    double defect(const Jet& dv) const {
        if (dv.rows() != tar_.real_dim() || dv.cols() != dom_.real_dim())
            throw std::invalid_argument("energy_identity_defect: dimension mismatch");
        return lhs(dv) - rhs(dv);
    }

private:
    StructureTriple dom_, tar_;
    std::vector<KForm> powers_;
    std::vector<Eigen::MatrixXd> omegas_;
    double inv_fact_ = 1;
};

inline double energy_identity_defect(const Jet& dv, const StructureTriple& dom,
                                     const StructureTriple& tar) {
    return EnergyIdentity(dom, tar).defect(dv);
}

// Sum of |du|^2 h^{4m} over interior nodes (no 1/2).
template <class Fld>
double dirichlet_energy(const Fld& u) {
    const Grid& g = u.grid();
    int idx[16];
    double s = 0;
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (!g.interior(idx, 2)) continue;
        s += differential(u, lin).squaredNorm();
    }
    return s * g.cell_volume();
}

template <class Fld>
Eigen::VectorXd laplacian_direct(const Fld& u, std::size_t lin) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    int idx[16];
    g.unravel(lin, idx);
    if (!g.interior(idx, 1)) throw std::out_of_range("laplacian_direct: boundary node");
    double c0[32], up[32], dn[32];
    u.value(lin, c0);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(C);
    for (int a = 0; a < D; ++a) {
        u.value(static_cast<std::size_t>(g.shift(lin, idx, a, +1)), up);
        u.value(static_cast<std::size_t>(g.shift(lin, idx, a, -1)), dn);
        for (int c = 0; c < C; ++c) out[c] += (up[c] - 2 * c0[c] + dn[c]) / (g.h * g.h);
    }
    return out;
}

// Structure coefficients as functions: domain matrices of x, target matrices of u(x).
struct StructureCoefficients {
    std::function<Eigen::MatrixXd(int unit, const double* x)> domain;
    std::function<Eigen::MatrixXd(int unit, const double* u)> target;

    static StructureCoefficients flat(const StructureTriple& dom, const StructureTriple& tar) {
        return {[dom](int k, const double*) { return dom.matrix(k); },
                [tar](int k, const double*) { return tar.matrix(k); }};
    }
};

namespace detail {

// psi^{as}_{beta alpha}(node) = i_a^s(x) I_alpha^beta(u(x)) with i_a^s = dom(s, a),
// I_alpha^beta = tar(beta, alpha); returns psi for one unit as [a][s] -> C x C matrix
template <class Fld>
std::vector<Eigen::MatrixXd> psi_at(const Fld& u, std::size_t lin, int unit,
                                    const StructureCoefficients& sc) {
    const Grid& g = u.grid();
    int D = g.dim();
    double x[16], val[32];
    g.position(lin, x);
    u.value(lin, val);
    Eigen::MatrixXd dm = sc.domain(unit, x);
    Eigen::MatrixXd tm = sc.target(unit, val);
    std::vector<Eigen::MatrixXd> psi(D * D);
    for (int a = 0; a < D; ++a)
        for (int s = 0; s < D; ++s) psi[a * D + s] = dm(s, a) * tm;
    return psi;
}

}  // namespace detail

// Sum over the three structures and over s < a of d_a(psi) d_s u - d_s(psi) d_a u,
// all derivatives central.
template <class Fld>
Eigen::VectorXd laplacian_jacobian_form(const Fld& u, std::size_t lin,
                                        const StructureCoefficients& sc) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    int idx[16];
    g.unravel(lin, idx);
    if (!g.interior(idx, 2)) throw std::out_of_range("laplacian_jacobian_form: boundary node");
    Jet du = differential(u, lin);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(C);
    for (int unit = 0; unit < 3; ++unit) {
        // d_b psi for every axis b
        std::vector<std::vector<Eigen::MatrixXd>> dpsi(D);
        for (int b = 0; b < D; ++b) {
            auto p = detail::psi_at(u, static_cast<std::size_t>(g.shift(lin, idx, b, +1)), unit, sc);
            auto q = detail::psi_at(u, static_cast<std::size_t>(g.shift(lin, idx, b, -1)), unit, sc);
            dpsi[b].resize(D * D);
            for (int k = 0; k < D * D; ++k) dpsi[b][k] = (p[k] - q[k]) / (2 * g.h);
        }
        for (int a = 0; a < D; ++a)
            for (int s = 0; s < a; ++s)
                out += dpsi[a][a * D + s] * du.col(s) - dpsi[s][a * D + s] * du.col(a);
    }
    return out;
}

template <class Fld>
Eigen::VectorXd laplacian_jacobian_form(const Fld& u, std::size_t lin, const StructureTriple& dom,
                                        const StructureTriple& tar) {
    return laplacian_jacobian_form(u, lin, StructureCoefficients::flat(dom, tar));
}

// Central divergence of the field F_a = sum_l I du(i e_a): the Laplacian obtained
// by substituting the first-order equation before any cancellation. Differs from
// laplacian_direct by div of the residual plus O(h^2).
template <class Fld>
Eigen::VectorXd laplacian_divergence_form(const Fld& u, std::size_t lin, const StructureTriple& dom,
                                          const StructureTriple& tar) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    int idx[16];
    g.unravel(lin, idx);
    if (!g.interior(idx, 2)) throw std::out_of_range("laplacian_divergence_form: boundary node");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(C);
    for (int a = 0; a < D; ++a) {
        auto F = [&](std::size_t node) {
            Jet du = differential(u, node);
            Eigen::VectorXd f = Eigen::VectorXd::Zero(C);
            for (int k = 0; k < 3; ++k) f += tar.matrix(k) * du * dom.matrix(k).col(a);
            return f;
        };
        out += (F(static_cast<std::size_t>(g.shift(lin, idx, a, +1))) -
                F(static_cast<std::size_t>(g.shift(lin, idx, a, -1)))) / (2 * g.h);
    }
    return out;
}

// max over interior 3-cells of |Stokes sum of u*Omega over the cell faces| / h^3.
// Face integrals use the trapezoid rule on the nodal pullbacks du^T W du. (Exact
// face integrals of the multilinear interpolant would give an identically zero
// sum for any nodal data.)
template <class Fld>
double pullback_closedness_defect(const Fld& u, const KForm& omega) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    if (omega.degree() != 2 || omega.ambient() != C)
        throw std::invalid_argument("pullback_closedness_defect: need a 2-form on the target");
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(C, C);
    for (int p = 0; p < C; ++p)
        for (int q = p + 1; q < C; ++q) {
            W(p, q) = omega.at_mask((1u << p) | (1u << q));
            W(q, p) = -W(p, q);
        }
    int idx[16];
    double worst = 0;
    std::vector<Eigen::MatrixXd> P(std::size_t(1) << D);
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        bool ok = true;
        for (int a = 0; a < D; ++a)
            if (idx[a] + 1 >= g.dims[a] || (g.domain == Domain::box && (idx[a] < 2 || idx[a] + 3 > g.dims[a])))
                ok = false;
        if (!ok) continue;
        for (std::size_t corner = 0; corner < P.size(); ++corner) {
            std::size_t node = lin;
            for (int a = 0; a < D; ++a) {
                if (!((corner >> a) & 1)) continue;
                if (g.domain == Domain::torus && idx[a] + 1 == g.dims[a])
                    node -= static_cast<std::size_t>(g.dims[a] - 1) * g.strides[a];
                else
                    node += g.strides[a];
            }
            Jet du = differential(u, node);
            P[corner] = du.transpose() * W * du;
        }
        // trapezoid integral over the face at offset `base` spanned by axes p < q
        auto face = [&](std::size_t base, int p, int q) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k) {
                std::size_t c = base | ((k & 1) << p) | ((k >> 1) << q);
                s += P[c](p, q);
            }
            return 0.25 * s * g.h * g.h;
        };
        for (int a = 0; a < D; ++a)
            for (int b = a + 1; b < D; ++b)
                for (int c = b + 1; c < D; ++c) {
                    double s = 0;
                    s += face(std::size_t(1) << a, b, c) - face(0, b, c);
                    s -= face(std::size_t(1) << b, a, c) - face(0, a, c);
                    s += face(std::size_t(1) << c, a, b) - face(0, a, b);
                    worst = std::max(worst, std::abs(s) / std::pow(g.h, 3));
                }
    }
    return worst;
}

// Multilinear interpolation of a stored field at an arbitrary point.
inline void interpolate(const GridField& u, const double* x, double* out) {
    const Grid& g = u.grid();
    int D = g.dim(), C = g.components();
    int base[16];
    double frac[16];
    for (int a = 0; a < D; ++a) {
        double s = (x[a] - g.origin()) / g.h;
        int i = static_cast<int>(std::floor(s));
        double f = s - i;
        if (g.domain == Domain::box) {
            if (i < 0) { i = 0; f = 0; }
            if (i >= g.dims[a] - 1) { i = g.dims[a] - 2; f = 1; }
        }
        base[a] = i;
        frac[a] = f;
    }
    for (int c = 0; c < C; ++c) out[c] = 0;
    for (int corner = 0; corner < (1 << D); ++corner) {
        double w = 1;
        std::size_t lin = 0;
        for (int a = 0; a < D; ++a) {
            int bit = (corner >> a) & 1;
            w *= bit ? frac[a] : 1 - frac[a];
            int j = base[a] + bit;
            if (g.domain == Domain::torus) j = ((j % g.dims[a]) + g.dims[a]) % g.dims[a];
            lin += static_cast<std::size_t>(j) * g.strides[a];
        }
        if (w == 0) continue;
        const double* v = u.at(lin);
        for (int c = 0; c < C; ++c) out[c] += w * v[c];
    }
}

using VectorFieldFn = std::function<void(const double* x, double* out)>;

// dE(u o (Id + tX))/dt at t = 0 by a symmetric difference in t
inline double domain_variation_derivative(const GridField& u, const VectorFieldFn& X,
                                          double t = 1e-3) {
    const Grid& g = u.grid();
    int D = g.dim();
    int idx[16];
    double x[16], v[16];
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (g.interior(idx, 4)) continue;
        g.position(lin, x);
        X(x, v);
        for (int a = 0; a < D; ++a)
            if (v[a] != 0)
                throw std::invalid_argument("domain_variation_derivative: X touches the boundary");
    }
    auto energy_at = [&](double tt) {
        GridField w(g);
        double y[16];
        for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
            g.position(lin, x);
            X(x, v);
            for (int a = 0; a < D; ++a) y[a] = x[a] + tt * v[a];
            interpolate(u, y, w.at(lin));
        }
        return dirichlet_energy(w);
    };
    return (energy_at(t) - energy_at(-t)) / (2 * t);
}

inline GridField heat_flow_step(const GridField& u, double dt) {
    const Grid& g = u.grid();
    if (!(dt > 0) || dt > g.h * g.h / (8.0 * g.m))
        throw std::invalid_argument("heat_flow_step: dt exceeds h^2/(8m)");
    GridField out = u;
    int idx[16];
    int C = g.components();
    for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
        g.unravel(lin, idx);
        if (!g.interior(idx, 1)) continue;
        Eigen::VectorXd lap = laplacian_direct(u, lin);
        double* o = out.at(lin);
        for (int c = 0; c < C; ++c) o[c] += dt * lap[c];
    }
    return out;
}

}  // namespace fueterlab
