#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "monotone.hpp"
#include "norms.hpp"
#include "parallel.hpp"
#include "quat.hpp"

namespace fueterlab {

using Vec2 = Eigen::Vector2d;
using cplx = std::complex<double>;

// ---- bubble profiles -------------------------------------------------------

enum class ProfileKind { core, ring };

inline const char* profile_name(ProfileKind k) { return k == ProfileKind::core ? "core" : "ring"; }

// phi(w) = A (Re F e + Im F f) with F = P(w) / (1 + |w|^2)^2, P = w (core) or
// w^2 + beta w (ring). Finite energy, phi(inf) = 0.
struct BubbleProfile {
    ProfileKind kind = ProfileKind::core;
    double beta = 0.5;
    double amplitude = 1.0;

    void eval(cplx w, cplx& F, cplx& Fw, cplx& Fwb) const {
        double q = 1.0 / (1.0 + std::norm(w));
        double q2 = q * q, q3 = q2 * q;
        cplx P, dP;
        if (kind == ProfileKind::core) {
            P = w;
            dP = 1.0;
        } else {
            P = w * w + beta * w;
            dP = 2.0 * w + beta;
        }
        F = P * q2;
        Fw = dP * q2 - 2.0 * P * std::conj(w) * q3;
        Fwb = -2.0 * P * w * q3;
    }

    // |grad phi|^2 at unit scale
    double density(cplx w) const {
        cplx F, Fw, Fwb;
        eval(w, F, Fw, Fwb);
        return 2 * amplitude * amplitude * (std::norm(Fw) + std::norm(Fwb));
    }

    // Dirichlet energy on R^2, trapezoid rule in (log r, theta)
    double energy() const {
        const int nth = 256;
        const double dt = 0.005;
        double s = 0;
        for (double t = -30; t < 30; t += dt) {
            double rho = std::exp(t), ring = 0;
            for (int j = 0; j < nth; ++j)
                ring += density(std::polar(rho, 2 * std::numbers::pi * j / nth));
            s += ring * rho * rho;
        }
        return s * dt * 2 * std::numbers::pi / nth;
    }
};

// ---- split coordinates -----------------------------------------------------

// Orthonormal frame of R^4 = H: X2 spans (d1, q d1) for q = ai + bj + ck, X1 the complement.
struct SplitFrame {
    Eigen::Vector4d d1, d2, s1, s2;

    static SplitFrame from_structure(const SphereStructure& s) {
        SplitFrame f;
        f.d1 = Eigen::Vector4d(1, 0, 0, 0);
        f.d2 = left_matrix({0, s.a, s.b, s.c}) * f.d1;
        std::vector<Eigen::Vector4d> basis = {f.d1, f.d2};
        for (int k = 0; k < 4 && basis.size() < 4; ++k) {
            Eigen::Vector4d v = Eigen::Vector4d::Unit(k);
            for (const auto& b : basis) v -= v.dot(b) * b;
            if (v.norm() > 1e-6) basis.push_back(v.normalized());
        }
        f.s1 = basis[2];
        f.s2 = basis[3];
        return f;
    }

    Eigen::Vector4d point(const Vec2& X1, const Vec2& X2) const {
        return X1(0) * s1 + X1(1) * s2 + X2(0) * d1 + X2(1) * d2;
    }
    Vec2 x1(const Eigen::Vector4d& x) const { return {x.dot(s1), x.dot(s2)}; }
    Vec2 x2(const Eigen::Vector4d& x) const { return {x.dot(d1), x.dot(d2)}; }
};

// A map on R^4 presented in split coordinates. jet writes the value u (4n)
// and the partials g1 = d/dX1, g2 = d/dX2 (4n x 2, column-major); any of the
// outputs may be null.
struct SplitMap {
    static constexpr int kMaxComponents = 16;

    int components = 4;
    std::function<void(const Vec2& X1, const Vec2& X2, double* u, double* g1, double* g2)> jet;
    bool x1_invariant = true;
    // quadrature hints: points where energy may concentrate, and the finest scale there
    std::vector<Vec2> features;
    double finest = 0;
    // constant partials of the weak limit (affine limits); empty means zero
    Eigen::MatrixXd base_g1, base_g2;
    SplitFrame frame = SplitFrame::from_structure({1, 0, 0});
    double domain_radius = std::numeric_limits<double>::infinity();

    double base_x1() const { return base_g1.size() ? base_g1.squaredNorm() : 0.0; }
    double base_x2() const { return base_g2.size() ? base_g2.squaredNorm() : 0.0; }

    // Jacobian of u minus the weak limit, standard coordinates of R^4 (4n x 4)
    Eigen::MatrixXd bubble_jacobian(const Vec2& X1, const Vec2& X2) const {
        Eigen::MatrixXd g1(components, 2), g2(components, 2);
        jet(X1, X2, nullptr, g1.data(), g2.data());
        if (base_g1.size()) g1 -= base_g1;
        if (base_g2.size()) g2 -= base_g2;
        return g1.col(0) * frame.s1.transpose() + g1.col(1) * frame.s2.transpose() +
               g2.col(0) * frame.d1.transpose() + g2.col(1) * frame.d2.transpose();
    }

    void partials(const Vec2& X1, const Vec2& X2, double* g1, double* g2) const {
        jet(X1, X2, nullptr, g1, g2);
    }
    double density_x2(const Vec2& X1, const Vec2& X2) const {
        double g2[2 * kMaxComponents];
        jet(X1, X2, nullptr, nullptr, g2);
        double s = 0;
        for (int k = 0; k < 2 * components; ++k) s += g2[k] * g2[k];
        return s;
    }
    double density_x1(const Vec2& X1, const Vec2& X2) const {
        double g1[2 * kMaxComponents];
        jet(X1, X2, nullptr, g1, nullptr);
        double s = 0;
        for (int k = 0; k < 2 * components; ++k) s += g1[k] * g1[k];
        return s;
    }
    double density(const Vec2& X1, const Vec2& X2) const {
        double g1[2 * kMaxComponents], g2[2 * kMaxComponents];
        jet(X1, X2, nullptr, g1, g2);
        double s = 0;
        for (int k = 0; k < 2 * components; ++k) s += g1[k] * g1[k] + g2[k] * g2[k];
        return s;
    }
    Eigen::VectorXd value(const Vec2& X1, const Vec2& X2) const {
        Eigen::VectorXd u(components);
        jet(X1, X2, u.data(), nullptr, nullptr);
        return u;
    }
};

// ---- concentrating sequences -------------------------------------------------

struct BubbleSpec {
    BubbleProfile profile;
    // delta_l = delta0 * ratio^l, centered at `center` (X2 coordinates) ...
    double delta0 = 1.0, ratio = 0.5;
    Vec2 center = Vec2::Zero();
    // ... or drifting into `center`: offset rho_l = rho0 * drift^l along `angle`,
    // with delta_l = delta_over_rho * rho_l
    bool drifting = false;
    double rho0 = 1.0, drift = 0.25, angle = 0.0, delta_over_rho = 0.1;
    Eigen::VectorXd target;  // e; f = -(aI + bJ + cK) e. Empty means the first basis vector.

    double scale(int l) const {
        return drifting ? delta_over_rho * rho0 * std::pow(drift, l) : delta0 * std::pow(ratio, l);
    }
    Vec2 center_at(int l) const {
        if (!drifting) return center;
        double rho = rho0 * std::pow(drift, l);
        return center + rho * Vec2(std::cos(angle), std::sin(angle));
    }
};

// u(x) = offset + B x + noise(x); noise = nu exp(-|X1 - c|^2 / 2 sigma^2) sin(k X2_0) e_0
struct SequenceSpec {
    std::string name = "sequence";
    int n = 1;
    SphereStructure structure{1, 0, 0};
    double base_gradient = 0.1;
    std::uint64_t base_seed = 7;
    std::vector<BubbleSpec> bubbles;
    std::vector<int> levels = {8, 9, 10, 11, 12};
    double noise_amplitude = 0, noise_sigma = 0.01, noise_wavenumber = 40;
    Vec2 noise_center = Vec2::Zero();
    double scale = 1.0;  // global dilation x -> x / scale
};

class ConcentratingSequence {
public:
    explicit ConcentratingSequence(SequenceSpec spec) : spec_(std::move(spec)) {
        if (spec_.n < 1 || 4 * spec_.n > SplitMap::kMaxComponents)
            throw std::invalid_argument("synth_sequence: n out of range");
        if (spec_.structure.norm_defect() > 1e-9)
            throw std::invalid_argument("synth_sequence: structure must be a unit vector");
        if (!(spec_.scale > 0)) throw std::invalid_argument("synth_sequence: scale must be positive");
        if (spec_.levels.empty()) throw std::invalid_argument("synth_sequence: no levels");
        if (!std::is_sorted(spec_.levels.begin(), spec_.levels.end()) ||
            std::adjacent_find(spec_.levels.begin(), spec_.levels.end()) != spec_.levels.end())
            throw std::invalid_argument("synth_sequence: levels must increase");
        const int N = 4 * spec_.n;
        for (auto& b : spec_.bubbles) {
            if (b.drifting ? !(b.drift > 0 && b.drift < 1 && b.rho0 > 0 && b.delta_over_rho > 0)
                           : !(b.ratio > 0 && b.ratio < 1 && b.delta0 > 0))
                throw std::invalid_argument("synth_sequence: scales must decrease in l");
            if (!(b.profile.amplitude > 0)) throw std::invalid_argument("synth_sequence: amplitude");
            if (b.target.size() == 0) b.target = Eigen::VectorXd::Unit(N, 0);
            if (b.target.size() != N || b.target.norm() == 0)
                throw std::invalid_argument("synth_sequence: bad target vector");
            b.target.normalize();
        }
        for (std::size_t i = 0; i < spec_.bubbles.size(); ++i)
            for (std::size_t j = i + 1; j < spec_.bubbles.size(); ++j)
                if (same_scale(spec_.bubbles[i], spec_.bubbles[j]))
                    throw std::invalid_argument("synth_sequence: overlapping same-scale bubbles at one center");
        frame_ = SplitFrame::from_structure(spec_.structure);
        StructureTriple tgt(spec_.n);
        Eigen::MatrixXd S = tgt.combination(spec_.structure);
        for (auto& b : spec_.bubbles) {
            frames_.push_back({b.target, -S * b.target});
            energies_.push_back(b.profile.energy());
        }
        std::mt19937_64 rng(spec_.base_seed);
        std::normal_distribution<double> N01(0, 1);
        offset_ = Eigen::VectorXd(N);
        for (int k = 0; k < N; ++k) offset_(k) = 0.1 * N01(rng);
        B_ = Eigen::MatrixXd(N, 4);
        for (int k = 0; k < N * 4; ++k) B_.data()[k] = spec_.base_gradient * N01(rng);
        B_ /= spec_.scale;
        Bd_.resize(N, 4);
        Bd_ << B_ * frame_.s1, B_ * frame_.s2, B_ * frame_.d1, B_ * frame_.d2;
    }

    const SequenceSpec& spec() const { return spec_; }
    const SplitFrame& frame() const { return frame_; }
    int components() const { return 4 * spec_.n; }
    const std::vector<int>& levels() const { return spec_.levels; }
    const std::vector<double>& energies() const { return energies_; }
    const Eigen::MatrixXd& base_gradient() const { return B_; }
    std::size_t bubble_count() const { return spec_.bubbles.size(); }

    double scale(std::size_t b, int l) const { return spec_.scale * spec_.bubbles[b].scale(l); }
    Vec2 center(std::size_t b, int l) const { return spec_.scale * spec_.bubbles[b].center_at(l); }
    Vec2 limit_center(std::size_t b) const { return spec_.scale * spec_.bubbles[b].center; }

    // sum of bubble energies converging to the limit point c
    double theta(const Vec2& c, double tol = 1e-9) const {
        double s = 0;
        for (std::size_t b = 0; b < bubble_count(); ++b)
            if ((limit_center(b) - c).norm() <= tol) s += energies_[b];
        return s;
    }

    // the sequence with every length multiplied by lambda
    ConcentratingSequence rescaled(double lambda) const {
        SequenceSpec s = spec_;
        s.scale *= lambda;
        s.noise_center *= lambda;
        s.noise_sigma *= lambda;
        s.noise_wavenumber /= lambda;
        return ConcentratingSequence(s);
    }

    bool has_level(int l) const {
        return std::find(spec_.levels.begin(), spec_.levels.end(), l) != spec_.levels.end();
    }

    void jet(int l, const Vec2& X1, const Vec2& X2, double* u, double* g1, double* g2) const {
        const int N = components();
        if (u) {
            Eigen::Map<Eigen::VectorXd> U(u, N);
            U = offset_ + Bd_.col(0) * X1(0) + Bd_.col(1) * X1(1) + Bd_.col(2) * X2(0) +
                Bd_.col(3) * X2(1);
        }
        if (g1) std::copy(Bd_.data(), Bd_.data() + 2 * N, g1);
        if (g2) std::copy(Bd_.data() + 2 * N, Bd_.data() + 4 * N, g2);
        for (std::size_t b = 0; b < bubble_count(); ++b) {
            const BubbleSpec& bs = spec_.bubbles[b];
            double delta = scale(b, l);
            Vec2 d = (X2 - center(b, l)) / delta;
            cplx F, Fw, Fwb;
            bs.profile.eval({d(0), d(1)}, F, Fw, Fwb);
            double A = bs.profile.amplitude;
            const Eigen::VectorXd& e = frames_[b].first;
            const Eigen::VectorXd& f = frames_[b].second;
            if (u)
                for (int k = 0; k < N; ++k) u[k] += A * (F.real() * e(k) + F.imag() * f(k));
            if (g2) {
                cplx Fx = Fw + Fwb, Fy = cplx(0, 1) * (Fw - Fwb);
                double s = A / delta;
                for (int k = 0; k < N; ++k) {
                    g2[k] += s * (Fx.real() * e(k) + Fx.imag() * f(k));
                    g2[N + k] += s * (Fy.real() * e(k) + Fy.imag() * f(k));
                }
            }
        }
        if (spec_.noise_amplitude != 0) {
            double sg = spec_.noise_sigma, kw = spec_.noise_wavenumber;
            Vec2 r = X1 - spec_.noise_center;
            double env = spec_.noise_amplitude * std::exp(-r.squaredNorm() / (2 * sg * sg));
            double sn = std::sin(kw * X2(0)), cs = std::cos(kw * X2(0));
            if (u) u[0] += env * sn;
            if (g1) {
                g1[0] += -env * sn * r(0) / (sg * sg);
                g1[N] += -env * sn * r(1) / (sg * sg);
            }
            if (g2) g2[0] += env * kw * cs;
        }
    }

    SplitMap member(int l) const {
        SplitMap m;
        m.components = components();
        m.jet = [this, l](const Vec2& X1, const Vec2& X2, double* u, double* g1, double* g2) {
            jet(l, X1, X2, u, g1, g2);
        };
        m.x1_invariant = spec_.noise_amplitude == 0;
        for (std::size_t b = 0; b < bubble_count(); ++b) {
            Vec2 c = limit_center(b);
            bool seen = false;
            for (const Vec2& p : m.features) seen = seen || (p - c).norm() < 1e-12;
            if (!seen) m.features.push_back(c);
            m.finest = m.finest > 0 ? std::min(m.finest, scale(b, l)) : scale(b, l);
        }
        m.base_g1 = Bd_.leftCols(2);
        m.base_g2 = Bd_.rightCols(2);
        m.frame = frame_;
        m.domain_radius = spec_.scale;
        return m;
    }

    // Full 4n x 4 Jacobian in standard coordinates of R^4.
    Eigen::MatrixXd jacobian(int l, const Vec2& X1, const Vec2& X2) const {
        const int N = components();
        Eigen::MatrixXd g1(N, 2), g2(N, 2);
        jet(l, X1, X2, nullptr, g1.data(), g2.data());
        return g1.col(0) * frame_.s1.transpose() + g1.col(1) * frame_.s2.transpose() +
               g2.col(0) * frame_.d1.transpose() + g2.col(1) * frame_.d2.transpose();
    }

private:
    bool same_scale(const BubbleSpec& a, const BubbleSpec& b) const {
        if ((a.center - b.center).norm() > 1e-12) return false;
        double ra = a.drifting ? a.drift : a.ratio;
        double rb = b.drifting ? b.drift : b.ratio;
        if (std::abs(ra - rb) > 1e-12) return false;
        // equal decay rates: two drifting bubbles on different rays stay apart
        if (a.drifting && b.drifting) return std::abs(a.angle - b.angle) < 1e-12;
        return true;
    }

    SequenceSpec spec_;
    SplitFrame frame_;
    std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> frames_;
    std::vector<double> energies_;
    Eigen::VectorXd offset_;
    Eigen::MatrixXd B_, Bd_;  // Bd_ = B [s1 s2 d1 d2]
};

inline ConcentratingSequence synth_sequence(const SequenceSpec& spec) {
    return ConcentratingSequence(spec);
}

// ---- reference quadrature on the X2 plane ------------------------------------

struct MeshOptions {
    int background = 96;    // cells per side of the square around the window
    double dt = 0.025;      // log-radius step of the polar patches
    int ntheta = 384;
    double depth = 1e-4;    // patches reach depth * finest scale
};

struct Mesh {
    std::vector<Vec2> p;
    std::vector<double> w;
};

// Area quadrature of the disk B_R(c): log-polar patches around the map's
// feature points, uniform cells elsewhere.
inline Mesh build_mesh(const SplitMap& f, const Vec2& c, double R, const MeshOptions& o = {}) {
    if (!(R > 0)) throw std::invalid_argument("build_mesh: radius must be positive");
    struct Patch {
        Vec2 p;
        double cap;
    };
    const std::vector<Vec2>& feats = f.features;
    std::vector<Patch> patches;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        double sep = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < feats.size(); ++j)
            if (j != i) sep = std::min(sep, (feats[i] - feats[j]).norm());
        double cap = std::min(R, 0.5 * sep);
        if ((feats[i] - c).norm() < R + cap) patches.push_back({feats[i], cap});
    }
    Mesh m;
    const double two_pi = 2 * std::numbers::pi;
    for (const Patch& P : patches) {
        double rho_min = f.finest > 0 ? o.depth * f.finest : 1e-8 * P.cap;
        rho_min = std::min(rho_min, 1e-3 * P.cap);
        int nt = static_cast<int>(std::ceil(std::log(P.cap / rho_min) / o.dt));
        double dt = std::log(P.cap / rho_min) / nt, dth = two_pi / o.ntheta;
        for (int i = 0; i < nt; ++i) {
            double ro = P.cap * std::exp(-i * dt), ri = P.cap * std::exp(-(i + 1) * dt);
            double rm = std::sqrt(ro * ri), area = 0.5 * (ro * ro - ri * ri) * dth;
            for (int j = 0; j < o.ntheta; ++j) {
                double th = (j + 0.5) * dth;
                Vec2 q = P.p + rm * Vec2(std::cos(th), std::sin(th));
                if ((q - c).norm() <= R) {
                    m.p.push_back(q);
                    m.w.push_back(area);
                }
            }
        }
        if ((P.p - c).norm() <= R) {
            m.p.push_back(P.p);
            m.w.push_back(std::numbers::pi * rho_min * rho_min);
        }
    }
    const int N = o.background;
    double h = 2 * R / N;
    for (int a = 0; a < N; ++a)
        for (int b = 0; b < N; ++b) {
            Vec2 q = c + Vec2(-R + (a + 0.5) * h, -R + (b + 0.5) * h);
            if ((q - c).norm() > R) continue;
            bool covered = false;
            for (const Patch& P : patches) covered = covered || (q - P.p).norm() < P.cap;
            if (covered) continue;
            m.p.push_back(q);
            m.w.push_back(h * h);
        }
    return m;
}

namespace detail {

// Gauss-Legendre nodes and weights on [0, 1] (Golub-Welsch)
inline std::vector<std::pair<double, double>> gauss_legendre01(int n) {
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        double b = k / std::sqrt(4.0 * k * k - 1);
        T(k, k - 1) = T(k - 1, k) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
    std::vector<std::pair<double, double>> out;
    for (int k = 0; k < n; ++k) {
        double v = es.eigenvectors()(0, k);
        out.push_back({0.5 * (es.eigenvalues()(k) + 1), v * v});
    }
    return out;
}

// int over B_rad(c) of g, Gauss in r^2 and trapezoid in theta
template <class G>
double disk_integral(G&& g, const Vec2& c, double rad, int nr = 6, int nth = 16) {
    static const auto gl6 = gauss_legendre01(6);
    const auto gl = nr == 6 ? gl6 : gauss_legendre01(nr);
    double s = 0;
    for (const auto& [x, w] : gl) {
        double r = rad * std::sqrt(x), ring = 0;
        for (int j = 0; j < nth; ++j) {
            // rings are staggered so the nodes do not line up radially
            double th = 2 * std::numbers::pi * j / nth + x;
            ring += g(Vec2(c + r * Vec2(std::cos(th), std::sin(th))));
        }
        s += w * ring / nth;
    }
    return s * std::numbers::pi * rad * rad;
}

}  // namespace detail

// ---- pipeline configuration --------------------------------------------------

struct BubbleConfig {
    double eps0 = 0.1;
    double eps1 = 0.025;       // neck window threshold
    double window = 0.05;      // X2 radius analysed around a Sigma point
    double max_scale = 0.01;   // concentration above this scale is not a bubble
    std::vector<double> density_radii = {0.01, 0.015, 0.02};
    double density_tol = 0.02;
    double neck_dt = 0.02;
    int neck_ntheta = 256;
    double neck_window = 1.0;
    double neck_separation = 2.0;   // minimal log-scale gap between peaks
    double offcenter_ratio = 0.5;
    double convergence_tol = 1e-3;
    double compact_radius = 4.0;    // compact ball for convergence, rescaled units
    int depth_cap = 8;
    int slice_grid = 9;
    double slice_halfwidth = 0.05;
    double slice_maximal = 0.02;
    double slice_lorentz = 50.0;
    double detect_halfwidth = 0.05;
    double detect_spacing = 0.005;
    double detect_slack = 1.0;
    MeshOptions mesh;
    int threads = 0;

    void validate() const {
        bool ok = eps0 > 0 && eps1 > 0 && window > 0 && max_scale > 0 && density_tol > 0 &&
                  neck_dt > 0 && neck_ntheta >= 8 && neck_window > 0 && neck_separation > 0 &&
                  offcenter_ratio > 0 && convergence_tol > 0 && compact_radius > 0 &&
                  depth_cap >= 1 && slice_grid >= 1 && slice_halfwidth >= 0 && slice_maximal > 0 &&
                  slice_lorentz > 0 && detect_halfwidth > 0 && detect_spacing > 0 &&
                  detect_slack >= 0 && density_radii.size() >= 2 && mesh.background >= 4 &&
                  mesh.dt > 0 && mesh.ntheta >= 8 && mesh.depth > 0;
        for (double r : density_radii) ok = ok && r > 0;
        if (!ok) throw std::invalid_argument("BubbleConfig: thresholds must be positive");
    }

    // the same analysis for a sequence with every length multiplied by lambda
    BubbleConfig rescaled(double lambda) const {
        BubbleConfig c = *this;
        c.window *= lambda;
        c.max_scale *= lambda;
        for (double& r : c.density_radii) r *= lambda;
        c.slice_halfwidth *= lambda;
        c.detect_halfwidth *= lambda;
        c.detect_spacing *= lambda;
        c.detect_slack /= lambda;
        return c;
    }
};

inline double concentration_target(double eps0, int m = 1) {
    return eps0 / (8 * std::pow(2.0, 4 * m));
}

// ---- energy ratios and defect density ------------------------------------------

// r^{-2} times the energy of B_r((X1, X2)) in R^4, optionally minus the weak limit's share
inline double energy_ratio(const SplitMap& u, const Vec2& X1, const Vec2& X2, double r,
                           const MeshOptions& o = {}, bool subtract_base = false) {
    Mesh m = build_mesh(u, X2, r, o);
    const double base = subtract_base ? u.base_x1() + u.base_x2() : 0.0;
    const double pi = std::numbers::pi;
    double s = 0;
    for (std::size_t i = 0; i < m.p.size(); ++i) {
        double s2 = r * r - (m.p[i] - X2).squaredNorm();
        if (s2 <= 0) continue;
        double e;
        if (u.x1_invariant) {
            e = pi * s2 * u.density(X1, m.p[i]);
        } else {
            const Vec2 q = m.p[i];
            e = detail::disk_integral([&](const Vec2& Y) { return u.density(Y, q); }, X1,
                                      std::sqrt(s2), 4, 8);
        }
        s += m.w[i] * (e - pi * s2 * base);
    }
    return s / (r * r);
}

// Density of the defect measure at (X1, X2): base-subtracted ratios of the last
// member, fitted affinely in r. A change of more than density_tol against the
// previous member is flagged.
inline DensityFit defect_density(const ConcentratingSequence& seq, const Vec2& X1, const Vec2& X2,
                                 const BubbleConfig& cfg = {}) {
    cfg.validate();
    const auto& lv = seq.levels();
    auto fit_at = [&](int l) {
        SplitMap u = seq.member(l);
        std::vector<double> q;
        for (double r : cfg.density_radii) q.push_back(energy_ratio(u, X1, X2, r, cfg.mesh, true));
        return fit_density(cfg.density_radii, q, 4, cfg.density_tol);
    };
    DensityFit f = fit_at(lv.back());
    if (lv.size() > 1) {
        DensityFit g = fit_at(lv[lv.size() - 2]);
        double scale = std::max({std::abs(f.theta), std::abs(g.theta), 1e-6});
        if (std::abs(f.theta - g.theta) > cfg.density_tol * scale) {
            f.reliable = false;
            f.reason = "unreliable-extrapolation";
        }
    }
    return f;
}

// Nodes of the X2-plane grid (slice X1 = 0) whose ratio stays >= eps0 - C r for every member.
inline std::vector<Vec2> blowup_set_detect(const ConcentratingSequence& seq, double eps0, double r,
                                           const BubbleConfig& cfg = {}, int min_level = 0,
                                           const Vec2& around = Vec2::Zero()) {
    cfg.validate();
    if (!(eps0 > 0) || !(r > 0) || r > cfg.max_scale * 10)
        throw std::invalid_argument("blowup_set_detect: need 0 < r <= r0");
    std::vector<int> lv;
    for (int l : seq.levels())
        if (l >= min_level) lv.push_back(l);
    if (lv.empty()) throw std::invalid_argument("blowup_set_detect: no members above min_level");
    std::vector<SplitMap> members;
    for (int l : lv) members.push_back(seq.member(l));
    const int N = static_cast<int>(std::floor(cfg.detect_halfwidth / cfg.detect_spacing + 1e-9));
    std::vector<Vec2> nodes;
    for (int a = -N; a <= N; ++a)
        for (int b = -N; b <= N; ++b) nodes.push_back(around + cfg.detect_spacing * Vec2(a, b));
    std::vector<char> hit(nodes.size(), 0);
    const double thr = eps0 - cfg.detect_slack * r;
    parallel_for(
        nodes.size(),
        [&](std::size_t k) {
            for (const SplitMap& u : members)
                if (energy_ratio(u, Vec2::Zero(), nodes[k], r, cfg.mesh) < thr) return;
            hit[k] = 1;
        },
        cfg.threads);
    std::vector<Vec2> out;
    for (std::size_t k = 0; k < nodes.size(); ++k)
        if (hit[k]) out.push_back(nodes[k]);
    return out;
}

// ---- good slices -----------------------------------------------------------------

namespace detail {
// L^{2,1} norm of a function given by values on cells of the given measures
inline double lorentz_21_weighted(std::vector<std::pair<double, double>> vm) {
    std::sort(vm.begin(), vm.end(), [](auto& a, auto& b) { return a.first > b.first; });
    double s = 0, mu = 0;
    for (std::size_t k = 0; k < vm.size(); ++k) {
        mu += vm[k].second;
        double next = k + 1 < vm.size() ? vm[k + 1].first : 0.0;
        s += (vm[k].first - next) * std::sqrt(mu);
    }
    return s;
}
}  // namespace detail

struct SliceChoice {
    Vec2 X1 = Vec2::Zero();
    std::vector<Vec2> slices;
    std::vector<double> f, maximal, lorentz;
    std::vector<char> admissible;
    std::size_t admissible_count = 0;
    double admissible_fraction() const {
        return slices.empty() ? 0.0 : double(admissible_count) / slices.size();
    }
};

// Candidate slices on a square grid around X1c; f(X1) = int |d_{X1} u|^2 dX2 over
// the window, its maximal function over the grid, and the L^{2,1} norm of
// |d_{X2} u| on the slice. Picks the admissible slice with the smallest maximal value.
inline SliceChoice slice_select(const SplitMap& u, const Vec2& X1c, const Vec2& X2c,
                                const BubbleConfig& cfg = {}) {
    cfg.validate();
    const int nc = cfg.slice_grid;
    const double sp = nc > 1 ? 2 * cfg.slice_halfwidth / (nc - 1) : 1.0;
    SliceChoice sc;
    for (int a = 0; a < nc; ++a)
        for (int b = 0; b < nc; ++b)
            sc.slices.push_back(nc > 1 ? Vec2(X1c + Vec2(-cfg.slice_halfwidth + a * sp,
                                                         -cfg.slice_halfwidth + b * sp))
                                       : X1c);
    Mesh mesh = build_mesh(u, X2c, cfg.window, cfg.mesh);
    const std::size_t S = sc.slices.size();
    sc.f.assign(S, 0);
    sc.lorentz.assign(S, 0);
    auto eval = [&](std::size_t k) {
        double f = 0;
        std::vector<std::pair<double, double>> vm(mesh.p.size());
        for (std::size_t i = 0; i < mesh.p.size(); ++i) {
            double g1[2 * SplitMap::kMaxComponents], g2[2 * SplitMap::kMaxComponents];
            u.partials(sc.slices[k], mesh.p[i], g1, g2);
            double e1 = 0, e2 = 0;
            for (int c = 0; c < 2 * u.components; ++c) {
                e1 += g1[c] * g1[c];
                e2 += g2[c] * g2[c];
            }
            f += mesh.w[i] * e1;
            vm[i] = {std::sqrt(e2), mesh.w[i]};
        }
        sc.f[k] = f;
        sc.lorentz[k] = detail::lorentz_21_weighted(std::move(vm));
    };
    if (u.x1_invariant) {
        eval(0);
        std::fill(sc.f.begin(), sc.f.end(), sc.f[0]);
        std::fill(sc.lorentz.begin(), sc.lorentz.end(), sc.lorentz[0]);
    } else {
        parallel_for(S, eval, cfg.threads);
    }
    ScalarGrid F({nc, nc}, sp);
    F.v = sc.f;
    sc.maximal = nc > 1 ? hl_maximal(F).v : sc.f;
    sc.admissible.assign(S, 0);
    long best = -1;
    for (std::size_t k = 0; k < S; ++k) {
        sc.admissible[k] = sc.maximal[k] <= cfg.slice_maximal && sc.lorentz[k] <= cfg.slice_lorentz;
        if (!sc.admissible[k]) continue;
        ++sc.admissible_count;
        if (best < 0) {
            best = static_cast<long>(k);
            continue;
        }
        double mb = sc.maximal[best], mk = sc.maximal[k];
        bool closer = (sc.slices[k] - X1c).norm() < (sc.slices[best] - X1c).norm();
        if (mk < mb * (1 - 1e-12) || (mk <= mb * (1 + 1e-12) && closer)) best = static_cast<long>(k);
    }
    if (best < 0) throw std::runtime_error("slice_select: no admissible slice");
    sc.X1 = sc.slices[best];
    return sc;
}

// ---- concentration scale -----------------------------------------------------------

struct Annulus {
    Vec2 center = Vec2::Zero();
    double inner = 0, outer = 1;
    bool contains(const Vec2& p) const {
        double d = (p - center).norm();
        return d >= inner && d <= outer;
    }
};

struct Concentration {
    bool found = false;
    double delta = 0;
    Vec2 x2 = Vec2::Zero();
    double value = 0, target = 0;
};

namespace detail {

// delta^{-2} int_{B_delta(X1) x B_delta(c)} |du|^2
inline double product_energy(const SplitMap& u, const Vec2& X1, const Vec2& c, double delta) {
    if (u.x1_invariant)
        return std::numbers::pi *
               disk_integral([&](const Vec2& q) { return u.density(X1, q); }, c, delta);
    double s = disk_integral(
        [&](const Vec2& Y) {
            return disk_integral([&](const Vec2& q) { return u.density(Y, q); }, c, delta, 4, 8);
        },
        X1, delta, 4, 8);
    return s / (delta * delta);
}

// compass search for a maximum of f inside the region
template <class F>
Vec2 compass_max(F&& f, Vec2 x, double step, double min_step, const Annulus& region,
                 double& best) {
    best = f(x);
    static const double dirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                      {0.7071067811865476, 0.7071067811865476},
                                      {-0.7071067811865476, 0.7071067811865476},
                                      {0.7071067811865476, -0.7071067811865476},
                                      {-0.7071067811865476, -0.7071067811865476}};
    int guard = 0;
    while (step > min_step && guard++ < 2000) {
        bool moved = false;
        for (const auto& d : dirs) {
            Vec2 y = x + step * Vec2(d[0], d[1]);
            if (!region.contains(y)) continue;
            double v = f(y);
            if (v > best) {
                best = v;
                x = y;
                moved = true;
                break;
            }
        }
        if (!moved) step *= 0.5;
    }
    return x;
}

}  // namespace detail

// Bisection in delta for max_{X2 in region} delta^{-2} E(B_delta(X1) x B_delta(X2))
// = eps0 / (8 * 2^{4m}), m = 1. Returns found = false when the target is not
// reached at any delta <= max_scale.
inline Concentration concentration_scale(const SplitMap& u, const Vec2& X1, const Annulus& region,
                                         const BubbleConfig& cfg = {}) {
    cfg.validate();
    Concentration out;
    out.target = concentration_target(cfg.eps0);
    const double target = out.target;
    Mesh mesh = build_mesh(u, region.center, region.outer, cfg.mesh);
    std::vector<std::pair<double, Vec2>> cand;
    for (const Vec2& p : mesh.p)
        if (region.contains(p)) cand.push_back({u.density(X1, p), p});
    if (cand.empty()) return out;
    const std::size_t K = std::min<std::size_t>(4, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + K, cand.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    const double pi = std::numbers::pi;
    if (!(cand[0].first > 0)) return out;
    double d0 = std::min(std::sqrt(target / (pi * pi * cand[0].first)), cfg.max_scale);

    Vec2 c = cand[0].second;
    double best = -1;
    for (std::size_t k = 0; k < K; ++k) {
        double v;
        Vec2 x = detail::compass_max(
            [&](const Vec2& q) { return detail::product_energy(u, X1, q, d0); }, cand[k].second,
            d0, 1e-6 * d0, region, v);
        if (v > best) {
            best = v;
            c = x;
        }
    }
    auto Q = [&](double d) {
        double v;
        c = detail::compass_max([&](const Vec2& q) { return detail::product_energy(u, X1, q, d); },
                                c, 0.1 * d, 1e-6 * d, region, v);
        return v;
    };
    double lo = d0, hi = d0;
    double qhi = Q(hi);
    while (qhi < target) {
        if (hi >= cfg.max_scale) {
            out.value = qhi;
            return out;
        }
        hi = std::min(2 * hi, cfg.max_scale);
        qhi = Q(hi);
    }
    lo = hi;
    for (int guard = 0; guard < 200; ++guard) {
        lo *= 0.5;
        if (Q(lo) < target) break;
    }
    for (int it = 0; it < 100 && hi / lo > 1 + 1e-12; ++it) {
        double mid = std::sqrt(lo * hi);
        if (Q(mid) >= target)
            hi = mid;
        else
            lo = mid;
    }
    out.value = Q(hi);
    out.found = true;
    out.delta = hi;
    out.x2 = c;
    return out;
}

// ---- necks in cylinder coordinates -------------------------------------------------

// W(t, theta) = u(X1, center + e^{-t} (cos theta, sin theta)) on cell midpoints
// t_0 < t_1 < ..., together with |grad W|^2 = r^2 |d_{X2} u|^2.
struct NeckView {
    Vec2 X1 = Vec2::Zero(), center = Vec2::Zero();
    double inner = 0, outer = 0, t_begin = 0, dt = 0, dtheta = 0, window = 1.0;
    int nt = 0, ntheta = 0, components = 0;
    double base_x2 = 0;
    std::vector<double> t, W, density;

    double rho(int i) const { return std::exp(-t[i]); }
    const double* sample(int i, int j) const {
        return W.data() + (static_cast<std::size_t>(i) * ntheta + j) * components;
    }
    double dens(int i, int j) const { return density[static_cast<std::size_t>(i) * ntheta + j]; }
    // energy of row i, optionally without the weak limit's share
    double row_energy(int i, bool subtract_base = false) const {
        double s = 0;
        for (int j = 0; j < ntheta; ++j) s += dens(i, j);
        if (subtract_base) s -= ntheta * rho(i) * rho(i) * base_x2;
        return s * dt * dtheta;
    }
    int window_cells() const { return std::max(1, static_cast<int>(std::lround(window / dt))); }
};

inline NeckView neck_view(const SplitMap& u, const Vec2& X1, const Vec2& center, double inner,
                          double outer, double dt = 0.02, int ntheta = 256, double window = 1.0) {
    if (!(inner > 0) || !(inner < outer)) throw std::invalid_argument("neck_view: need 0 < inner < outer");
    if (!(dt > 0) || ntheta < 8 || !(window > 0)) throw std::invalid_argument("neck_view: bad resolution");
    if (center.norm() + outer > u.domain_radius)
        throw std::out_of_range("neck_view: annulus outside domain");
    NeckView v;
    v.X1 = X1;
    v.center = center;
    v.inner = inner;
    v.outer = outer;
    v.window = window;
    v.components = u.components;
    v.base_x2 = u.base_x2();
    v.t_begin = -std::log(outer);
    double len = std::log(outer / inner);
    v.nt = std::max(1, static_cast<int>(std::ceil(len / dt)));
    v.dt = len / v.nt;
    v.ntheta = ntheta;
    v.dtheta = 2 * std::numbers::pi / ntheta;
    v.t.resize(v.nt);
    v.W.resize(static_cast<std::size_t>(v.nt) * ntheta * u.components);
    v.density.resize(static_cast<std::size_t>(v.nt) * ntheta);
    for (int i = 0; i < v.nt; ++i) {
        v.t[i] = v.t_begin + (i + 0.5) * v.dt;
        double r = std::exp(-v.t[i]);
        for (int j = 0; j < ntheta; ++j) {
            double th = j * v.dtheta;
            Vec2 X2 = center + r * Vec2(std::cos(th), std::sin(th));
            double g2[2 * SplitMap::kMaxComponents];
            std::size_t lin = static_cast<std::size_t>(i) * ntheta + j;
            u.jet(X1, X2, v.W.data() + lin * u.components, nullptr, g2);
            double s = 0;
            for (int c = 0; c < 2 * u.components; ++c) s += g2[c] * g2[c];
            v.density[lin] = r * r * s;
        }
    }
    return v;
}

// int |grad W|^2 dt dtheta from the samples: central differences in t
// (one-sided at the ends), periodic in theta
inline double cylinder_energy(const NeckView& v) {
    double s = 0;
    const int C = v.components;
    for (int i = 0; i < v.nt; ++i)
        for (int j = 0; j < v.ntheta; ++j) {
            int jp = (j + 1) % v.ntheta, jm = (j + v.ntheta - 1) % v.ntheta;
            int ip = std::min(i + 1, v.nt - 1), im = std::max(i - 1, 0);
            double ht = (ip - im) * v.dt;
            for (int c = 0; c < C; ++c) {
                double wt = ht > 0 ? (v.sample(ip, j)[c] - v.sample(im, j)[c]) / ht : 0.0;
                double wth = (v.sample(i, jp)[c] - v.sample(i, jm)[c]) / (2 * v.dtheta);
                s += wt * wt + wth * wth;
            }
        }
    return s * v.dt * v.dtheta;
}

// windowed energies e^{2t} int_{|X1| <= e^{-t}} int_t^{t+M} int_{S^1} |grad W|^2,
// the X1 factor taken at the slice (= pi); entry i starts at t_begin + i dt
inline std::vector<double> window_energies(const NeckView& v) {
    const int k = v.window_cells();
    if (k > v.nt) throw std::invalid_argument("neck_scan: window does not fit");
    std::vector<double> rows(v.nt);
    for (int i = 0; i < v.nt; ++i) rows[i] = v.row_energy(i);
    std::vector<double> out(v.nt - k + 1);
    double s = 0;
    for (int i = 0; i < k; ++i) s += rows[i];
    for (int i = 0; i + k <= v.nt; ++i) {
        out[i] = std::numbers::pi * s;
        if (i + k < v.nt) s += rows[i + k] - rows[i];
    }
    return out;
}

// start of the most energetic window, if it reaches eps1
inline std::optional<double> neck_scan(const NeckView& v, double eps1) {
    auto e = window_energies(v);
    auto it = std::max_element(e.begin(), e.end());
    if (*it < eps1) return std::nullopt;
    return v.t_begin + (it - e.begin()) * v.dt;
}

struct NeckPeak {
    double t_start = 0, energy = 0;
    double middle(double window) const { return t_start + 0.5 * window; }
};

// windows >= eps1 that are maximal within +-separation; ordered by t
inline std::vector<NeckPeak> neck_peaks(const NeckView& v, double eps1, double separation) {
    auto e = window_energies(v);
    const int n = static_cast<int>(e.size());
    const int reach = std::max(1, static_cast<int>(std::lround(separation / v.dt)));
    std::vector<NeckPeak> out;
    for (int i = 0; i < n; ++i) {
        if (e[i] < eps1) continue;
        bool peak = true;
        for (int j = std::max(0, i - reach); j <= std::min(n - 1, i + reach) && peak; ++j)
            if (j < i ? e[j] >= e[i] : e[j] > e[i]) peak = false;
        if (peak) out.push_back({v.t_begin + i * v.dt, e[i]});
    }
    return out;
}

// sup of |X2 - center| |d_{X2} u| = |grad W| over rows with t in [t_from, t_to]
inline double neck_l2inf_check(const NeckView& v,
                               double t_from = -std::numeric_limits<double>::infinity(),
                               double t_to = std::numeric_limits<double>::infinity()) {
    double s = 0;
    for (int i = 0; i < v.nt; ++i) {
        if (v.t[i] < t_from || v.t[i] > t_to) continue;
        for (int j = 0; j < v.ntheta; ++j) s = std::max(s, v.dens(i, j));
    }
    return std::sqrt(s);
}

// same supremum from finite differences of the W samples
inline double neck_l2inf_samples(const NeckView& v) {
    double s = 0;
    const int C = v.components;
    for (int i = 1; i + 1 < v.nt; ++i)
        for (int j = 0; j < v.ntheta; ++j) {
            int jp = (j + 1) % v.ntheta, jm = (j + v.ntheta - 1) % v.ntheta;
            double g = 0;
            for (int c = 0; c < C; ++c) {
                double wt = (v.sample(i + 1, j)[c] - v.sample(i - 1, j)[c]) / (2 * v.dt);
                double wth = (v.sample(i, jp)[c] - v.sample(i, jm)[c]) / (2 * v.dtheta);
                g += wt * wt + wth * wth;
            }
            s = std::max(s, g);
        }
    return std::sqrt(s);
}

// ---- rescaling -------------------------------------------------------------------------

struct ExtractedBubble {
    Vec2 center = Vec2::Zero();
    double scale = 0;
    bool converged = true;
    double sup_difference = 0, profile_scale = 0;
    double energy = 0;
    bool nonconstant = false;
    std::vector<Vec2> y;                   // compact-ball sample points, rescaled units
    std::vector<Eigen::VectorXd> profile;  // v(y) - v(0) of the last member
};

namespace detail {

inline std::vector<Vec2> compact_points(double R) {
    std::vector<Vec2> y = {Vec2::Zero()};
    for (int k = 1; k <= 4; ++k)
        for (int j = 0; j < 12; ++j) {
            double th = 2 * std::numbers::pi * j / 12 + 0.1 * k;
            y.push_back(R * k / 4.0 * Vec2(std::cos(th), std::sin(th)));
        }
    return y;
}

// v(y) - v(0) and d_y v = delta d_{X2} u at the sample points
inline void rescaled_samples(const SplitMap& u, const Vec2& X1, const Concentration& c,
                             const std::vector<Vec2>& y, std::vector<Eigen::VectorXd>& val,
                             std::vector<Eigen::MatrixXd>& grad) {
    const int N = u.components;
    Eigen::VectorXd v0 = u.value(X1, c.x2);
    val.clear();
    grad.clear();
    for (const Vec2& p : y) {
        Eigen::VectorXd v(N);
        Eigen::MatrixXd g(N, 2);
        u.jet(X1, c.x2 + c.delta * p, v.data(), nullptr, g.data());
        v -= v0;
        if (u.base_g2.size()) {
            // the weak limit is affine; its rescaled part is not the bubble
            v -= c.delta * u.base_g2 * p;
            g -= u.base_g2;
        }
        val.push_back(v);
        grad.push_back(c.delta * g);
    }
}

// consecutive-member sup distance of values (modulo constants) and first derivatives
inline void convergence(const std::vector<SplitMap>& members, const std::vector<Vec2>& X1,
                        const std::vector<Concentration>& conc, const BubbleConfig& cfg,
                        ExtractedBubble& out) {
    out.y = compact_points(cfg.compact_radius);
    std::vector<Eigen::VectorXd> pv, cv;
    std::vector<Eigen::MatrixXd> pg, cg;
    out.sup_difference = 0;
    for (std::size_t k = 0; k < members.size(); ++k) {
        rescaled_samples(members[k], X1[k], conc[k], out.y, cv, cg);
        if (k > 0)
            for (std::size_t i = 0; i < out.y.size(); ++i)
                out.sup_difference = std::max({out.sup_difference, (cv[i] - pv[i]).lpNorm<Eigen::Infinity>(),
                                               (cg[i] - pg[i]).lpNorm<Eigen::Infinity>()});
        std::swap(pv, cv);
        std::swap(pg, cg);
    }
    out.profile_scale = 0;
    for (std::size_t i = 0; i < out.y.size(); ++i)
        out.profile_scale = std::max({out.profile_scale, pv[i].lpNorm<Eigen::Infinity>(),
                                      pg[i].lpNorm<Eigen::Infinity>()});
    out.profile = pv;
    out.converged = out.sup_difference <= cfg.convergence_tol * out.profile_scale;
}

// int over the annulus of |d_{X2} u|^2 minus the weak limit's share
inline double annulus_energy(const SplitMap& u, const Vec2& X1, const Annulus& A,
                             const MeshOptions& o) {
    Mesh m = build_mesh(u, A.center, A.outer, o);
    double b = u.base_x2(), s = 0;
    for (std::size_t i = 0; i < m.p.size(); ++i)
        if (A.contains(m.p[i])) s += m.w[i] * (u.density_x2(X1, m.p[i]) - b);
    return s;
}

}  // namespace detail

// v_l(y) = u_l(X1_l, X2_l + delta_l y) for consecutive members (increasing l);
// the energy is taken over `domain` for the last member.
inline ExtractedBubble rescale_and_extract(const std::vector<SplitMap>& members,
                                           const std::vector<Vec2>& X1,
                                           const std::vector<Concentration>& conc,
                                           const Annulus& domain, const BubbleConfig& cfg = {},
                                           std::optional<double> energy = std::nullopt) {
    cfg.validate();
    if (members.empty() || members.size() != X1.size() || members.size() != conc.size())
        throw std::invalid_argument("rescale_and_extract: mismatched inputs");
    for (const auto& c : conc)
        if (!c.found) throw std::runtime_error("rescale_and_extract: no concentration");
    ExtractedBubble out;
    out.center = conc.back().x2;
    out.scale = conc.back().delta;
    detail::convergence(members, X1, conc, cfg, out);
    out.energy = energy ? *energy : detail::annulus_energy(members.back(), X1.back(), domain, cfg.mesh);
    out.nonconstant = out.energy >= cfg.eps0;
    return out;
}

// ---- bubble structure and calibration ------------------------------------------------------

struct StructureFit {
    SphereStructure structure;
    double residual = 0;
    Eigen::VectorXd e, v;  // orthonormal basis of the domain 2-plane
};

// For a rank-2 jet: the domain plane span(e, v) with v = (ai + bj + ck) e, and the
// relative defect of du(S x) = -S du(x) on that plane. The sign of (a, b, c) is
// fixed by making the first non-negligible component positive.
inline StructureFit bubble_structure(const Eigen::MatrixXd& du, double rank_tol = 1e-6) {
    if (du.cols() % 4 || du.rows() % 4 || du.cols() == 0)
        throw std::invalid_argument("bubble_structure: jet must be 4n x 4m");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(du, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv.size() < 2 || !(sv(0) > 0) || sv(1) / sv(0) < rank_tol ||
        (sv.size() > 2 && sv(2) / sv(0) >= rank_tol))
        throw std::domain_error("bubble_structure: rank != 2");
    StructureFit f;
    f.e = svd.matrixV().col(0);
    f.v = svd.matrixV().col(1);
    StructureTriple dom(static_cast<int>(du.cols() / 4)), tgt(static_cast<int>(du.rows() / 4));
    double abc[3];
    for (int u = 0; u < 3; ++u) abc[u] = f.v.dot(dom.matrix(u) * f.e);
    double nrm = std::sqrt(abc[0] * abc[0] + abc[1] * abc[1] + abc[2] * abc[2]);
    if (nrm < 1e-12) throw std::domain_error("bubble_structure: plane is not a complex line");
    for (double& x : abc) x /= nrm;
    for (double x : abc)
        if (std::abs(x) > 1e-9) {
            if (x < 0)
                for (double& y : abc) y = -y;
            break;
        }
    f.structure = {abc[0], abc[1], abc[2]};
    Eigen::MatrixXd P = f.e * f.e.transpose() + f.v * f.v.transpose();
    Eigen::MatrixXd R = du * P * dom.combination(f.structure) * P +
                        tgt.combination(f.structure) * du * P;
    f.residual = R.norm() / du.norm();
    return f;
}

// 1 - <(aI + bJ + cK) e1, e2> for an orthonormal pair in R^{4n}
inline double calibration_defect(const Eigen::VectorXd& e1, const Eigen::VectorXd& e2,
                                 const SphereStructure& s) {
    if (e1.size() != e2.size() || e1.size() % 4 || e1.size() == 0)
        throw std::invalid_argument("calibration_defect: vectors must lie in R^{4n}");
    if (std::abs(e1.norm() - 1) > 1e-9 || std::abs(e2.norm() - 1) > 1e-9 ||
        std::abs(e1.dot(e2)) > 1e-9 || s.norm_defect() > 1e-9)
        throw std::invalid_argument("calibration_defect: non-orthonormal input");
    StructureTriple T(static_cast<int>(e1.size() / 4));
    return 1.0 - e2.dot(T.combination(s) * e1);
}

// ---- bubble tree ------------------------------------------------------------------------

struct TreeNode {
    enum class Kind { root, bubble, neck };
    Kind kind = Kind::root;
    Vec2 center = Vec2::Zero();
    double scale = 0;   // concentration scale (bubbles), outer radius (necks)
    double inner = 0;   // inner radius (necks)
    double energy = 0;
    std::optional<SphereStructure> structure;
    double structure_residual = 0;
    double l2inf = 0;   // necks: sup |X2 - c| |d_{X2} u|
    double convergence_gap = 0;
    int parent = -1;
    std::string key;
};

inline const char* kind_name(TreeNode::Kind k) {
    switch (k) {
        case TreeNode::Kind::root: return "root";
        case TreeNode::Kind::bubble: return "bubble";
        default: return "neck";
    }
}

struct BubbleTree {
    int level = 0;
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    double residual_neck_energy = 0;  // neck energy plus rejected concentrations
    double rejected_energy = 0;
    std::vector<std::string> diagnostics;

    std::size_t bubble_count() const {
        std::size_t k = 0;
        for (const auto& n : nodes) k += n.kind == TreeNode::Kind::bubble;
        return k;
    }
    double sum_energy() const {
        double s = 0;
        for (const auto& n : nodes)
            if (n.kind == TreeNode::Kind::bubble) s += n.energy;
        return s;
    }
    // bubble generations below the root
    int depth() const {
        int d = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].kind != TreeNode::Kind::bubble) continue;
            int k = 0;
            for (int p = static_cast<int>(i); p > 0 && k <= static_cast<int>(nodes.size()); p = nodes[p].parent) ++k;
            d = std::max(d, k);
        }
        return d;
    }
    std::vector<std::size_t> children(std::size_t i) const {
        std::vector<std::size_t> c;
        for (std::size_t k = 0; k < nodes.size(); ++k)
            if (nodes[k].parent == static_cast<int>(i)) c.push_back(k);
        return c;
    }
};

struct ClusterSummary {
    Vec2 point = Vec2::Zero();
    DensityFit theta;
    double sum_energy = 0;
};

struct QuantizeReport {
    std::vector<ClusterSummary> clusters;
    std::vector<BubbleTree> levels;  // one tree per member, increasing level
    double theta = 0, sum_energy = 0, residual_neck_energy = 0;
    bool residual_nonincreasing = true;
    std::vector<std::string> diagnostics;

    double quantization_gap() const { return std::abs(theta - sum_energy); }
    std::vector<double> residual_series() const {
        std::vector<double> r;
        for (const auto& t : levels) r.push_back(t.residual_neck_energy);
        return r;
    }
};

namespace detail {

// u with its gradient switched off outside the annulus (values untouched)
inline SplitMap masked(const SplitMap& u, const Annulus& A) {
    SplitMap m = u;
    auto inner = u.jet;
    const int C = u.components;
    m.jet = [inner, A, C](const Vec2& X1, const Vec2& X2, double* v, double* g1, double* g2) {
        inner(X1, X2, v, g1, g2);
        if (A.contains(X2)) return;
        if (g1) std::fill(g1, g1 + 2 * C, 0.0);
        if (g2) std::fill(g2, g2 + 2 * C, 0.0);
    };
    return m;
}

inline SplitMap with_feature(const SplitMap& u, const Vec2& p, double scale) {
    SplitMap m = u;
    m.features.push_back(p);
    m.finest = m.finest > 0 ? std::min(m.finest, scale) : scale;
    return m;
}

struct FoundBubble {
    std::string key;
    Concentration conc;
    double energy = 0;
    int parent = -1;  // index into Discovery::bubbles, -1 = root
    std::optional<SphereStructure> structure;
    double structure_residual = 0;
};

struct FoundNeck {
    Vec2 center = Vec2::Zero();
    double inner = 0, outer = 0, energy = 0, l2inf = 0;
    int parent = -1;
};

struct Discovery {
    Vec2 X1 = Vec2::Zero();
    std::vector<FoundBubble> bubbles;
    std::vector<FoundNeck> necks;
    std::vector<std::string> diagnostics;
};

struct ClusterResult {
    int top = -1;
    double inner_sum = 0;  // energy of everything below the top
};

inline void attach_structure(const SplitMap& u, const Vec2& X1, FoundBubble& b,
                             std::vector<std::string>& diag) {
    try {
        auto f = bubble_structure(b.conc.delta * u.bubble_jacobian(X1, b.conc.x2));
        b.structure = f.structure;
        b.structure_residual = f.residual;
    } catch (const std::exception& e) {
        diag.push_back("bubble " + b.key + ": structure unavailable (" + e.what() + ")");
    }
}

// One concentration point: smallest bubble first, then the neck scan around it
// splits the disk into bubble bands and necks (middle halves of the log gaps).
// At depth > 0 the outermost band belongs to the caller's bubble.
inline ClusterResult discover_cluster(const SplitMap& u, const Vec2& X1, const Vec2& c0, double R0,
                                      int depth, int parent_top, const std::string& key,
                                      const BubbleConfig& cfg, Discovery& out) {
    ClusterResult res;
    Concentration conc = concentration_scale(u, X1, Annulus{c0, 0, R0}, cfg);
    if (!conc.found) {
        if (depth == 0) out.diagnostics.push_back("cluster " + key + ": no concentration");
        return res;
    }
    const Vec2 x1 = conc.x2;
    const double outer = R0 - (x1 - c0).norm();
    const double inner = 1e-2 * conc.delta;
    if (!(outer > 4 * inner)) {
        out.diagnostics.push_back("cluster " + key + ": concentration at the region boundary");
        return res;
    }
    NeckView view = neck_view(u, X1, x1, inner, outer, cfg.neck_dt, cfg.neck_ntheta, cfg.neck_window);
    std::vector<NeckPeak> peaks = neck_peaks(view, cfg.eps1, cfg.neck_separation);
    if (peaks.empty()) {
        auto e = window_energies(view);
        auto it = std::max_element(e.begin(), e.end());
        peaks.push_back({view.t_begin + (it - e.begin()) * view.dt, *it});
    }
    const int K = static_cast<int>(peaks.size());
    const double M = view.window;
    std::vector<double> P(K), lo(K), hi(K);
    for (int k = 0; k < K; ++k) P[k] = peaks[k].middle(M);
    for (int k = 0; k < K; ++k) {
        double gin = k == 0 ? P[0] - view.t_begin : P[k] - P[k - 1];
        lo[k] = P[k] - 0.25 * std::max(gin, 0.0);
        hi[k] = k + 1 < K ? P[k] + 0.25 * (P[k + 1] - P[k]) : std::numeric_limits<double>::infinity();
    }
    lo[0] = std::max(lo[0], view.t_begin);

    // segment energies: 0 outer neck, 2k+1 band k, 2k+2 neck between k and k+1
    std::vector<double> cuts;
    for (int k = 0; k < K; ++k) {
        cuts.push_back(lo[k]);
        if (k + 1 < K) cuts.push_back(hi[k]);
    }
    std::vector<double> seg(2 * K, 0.0);
    {
        Mesh mesh = build_mesh(u, x1, outer, cfg.mesh);
        const double b = u.base_x2();
        for (std::size_t i = 0; i < mesh.p.size(); ++i) {
            double r = (mesh.p[i] - x1).norm();
            double t = r > 0 ? -std::log(r) : std::numeric_limits<double>::infinity();
            auto s = std::upper_bound(cuts.begin(), cuts.end(), t) - cuts.begin();
            seg[s] += mesh.w[i] * (u.density_x2(X1, mesh.p[i]) - b);
        }
    }

    // off-centre peaks: energy centroid of the peak window far from x1
    std::vector<char> off(K, 0);
    std::vector<Vec2> centroid(K, x1);
    for (int k = 0; k + 1 < K; ++k) {
        double w = 0;
        Vec2 z = Vec2::Zero();
        for (int i = 0; i < view.nt; ++i) {
            if (view.t[i] < peaks[k].t_start || view.t[i] > peaks[k].t_start + M) continue;
            double rho = view.rho(i);
            for (int j = 0; j < view.ntheta; ++j) {
                double d = view.dens(i, j), th = j * view.dtheta;
                w += d;
                z += d * rho * Vec2(std::cos(th), std::sin(th));
            }
        }
        if (w > 0) z /= w;
        centroid[k] = x1 + z;
        off[k] = z.norm() > cfg.offcenter_ratio * std::exp(-P[k]);
    }

    auto band = [&](int k) {
        return Annulus{x1, std::isfinite(hi[k]) ? std::exp(-hi[k]) : 0.0, std::exp(-lo[k])};
    };
    std::vector<int> idx(K, -1);
    int last_centered = parent_top;
    for (int k = 0; k < K; ++k) {
        std::string bkey = key + "." + std::to_string(k);
        if (depth > 0 && k == 0) {
            // the caller's bubble: its scale comes from this cluster
            FoundBubble fb;
            fb.key = key;
            fb.conc = K == 1 ? conc : concentration_scale(masked(u, band(0)), X1, band(0), cfg);
            fb.parent = parent_top;
            if (!fb.conc.found) {
                out.diagnostics.push_back("bubble " + key + ": no concentration in its band");
                return res;
            }
            attach_structure(u, X1, fb, out.diagnostics);
            out.bubbles.push_back(fb);
            idx[0] = res.top = static_cast<int>(out.bubbles.size()) - 1;
            last_centered = idx[0];
            continue;
        }
        if (off[k]) {
            const double rad = 0.25 * (centroid[k] - x1).norm();
            if (depth + 1 >= cfg.depth_cap) {
                out.diagnostics.push_back("bubble " + bkey + ": recursion depth cap exceeded");
                FoundBubble fb;
                fb.key = bkey;
                fb.conc = concentration_scale(u, X1, Annulus{centroid[k], 0, rad}, cfg);
                fb.energy = seg[2 * k + 1];
                fb.parent = last_centered;
                if (fb.conc.found) {
                    attach_structure(u, X1, fb, out.diagnostics);
                    out.bubbles.push_back(fb);
                    idx[k] = static_cast<int>(out.bubbles.size()) - 1;
                }
                continue;
            }
            SplitMap sub = with_feature(u, centroid[k], std::exp(-P[k]));
            ClusterResult r = discover_cluster(sub, X1, centroid[k], rad, depth + 1, last_centered,
                                               bkey, cfg, out);
            if (r.top >= 0) {
                out.bubbles[r.top].energy = seg[2 * k + 1] - r.inner_sum;
                idx[k] = r.top;
            }
            continue;
        }
        FoundBubble fb;
        fb.key = bkey;
        fb.conc = k + 1 == K ? conc : concentration_scale(masked(u, band(k)), X1, band(k), cfg);
        fb.energy = seg[2 * k + 1];
        fb.parent = last_centered;
        if (!fb.conc.found) {
            out.diagnostics.push_back("bubble " + bkey + ": no concentration in its band");
            continue;
        }
        attach_structure(u, X1, fb, out.diagnostics);
        out.bubbles.push_back(fb);
        idx[k] = last_centered = static_cast<int>(out.bubbles.size()) - 1;
    }
    if (depth > 0 && res.top < 0) return res;

    // necks: parent is the bubble on the outer side
    auto add_neck = [&](double t_lo, double t_hi, double e, int parent) {
        FoundNeck n;
        n.center = x1;
        n.outer = std::exp(-t_lo);
        n.inner = std::exp(-t_hi);
        n.energy = e;
        n.l2inf = neck_l2inf_check(view, t_lo, t_hi);
        n.parent = parent;
        out.necks.push_back(n);
        if (depth > 0) res.inner_sum += e;
    };
    if (depth == 0) add_neck(view.t_begin, lo[0], seg[0], parent_top);
    for (int k = 0; k + 1 < K; ++k) {
        int p = parent_top;
        for (int j = k; j >= 0; --j)
            if (idx[j] >= 0 && !off[j]) {
                p = idx[j];
                break;
            }
        if (depth > 0 && k == 0) p = res.top;
        add_neck(hi[k], lo[k + 1], seg[2 * k + 2], p);
    }
    if (depth > 0)
        for (int k = 1; k < K; ++k)
            if (idx[k] >= 0) res.inner_sum += out.bubbles[idx[k]].energy;
    return res;
}

// connected components of grid nodes (8-neighbourhood)
inline std::vector<std::vector<Vec2>> components(const std::vector<Vec2>& nodes, double spacing) {
    std::vector<int> label(nodes.size(), -1);
    std::vector<std::vector<Vec2>> out;
    for (std::size_t s = 0; s < nodes.size(); ++s) {
        if (label[s] >= 0) continue;
        std::vector<std::size_t> stack = {s};
        label[s] = static_cast<int>(out.size());
        out.emplace_back();
        while (!stack.empty()) {
            std::size_t a = stack.back();
            stack.pop_back();
            out.back().push_back(nodes[a]);
            for (std::size_t b = 0; b < nodes.size(); ++b)
                if (label[b] < 0 && (nodes[a] - nodes[b]).lpNorm<Eigen::Infinity>() < 1.5 * spacing) {
                    label[b] = label[s];
                    stack.push_back(b);
                }
        }
    }
    return out;
}

}  // namespace detail

// Full extraction on every member. Bubbles must converge against the previous
// member and carry at least eps0; anything else is counted with the necks.
inline std::pair<BubbleTree, QuantizeReport> quantize(const ConcentratingSequence& seq,
                                                      const BubbleConfig& cfg = {}) {
    cfg.validate();
    QuantizeReport rep;
    const std::vector<int>& L = seq.levels();
    const double r = cfg.density_radii.front();
    auto nodes = blowup_set_detect(seq, cfg.eps0, r, cfg, L.front());
    auto comps = detail::components(nodes, cfg.detect_spacing);
    std::vector<Vec2> centers;
    for (const auto& c : comps) {
        Vec2 m = Vec2::Zero();
        for (const Vec2& p : c) m += p;
        centers.push_back(m / double(c.size()));
    }

    // analysed members: every level plus the one before the first
    std::vector<int> lv = {L.front() - 1};
    lv.insert(lv.end(), L.begin(), L.end());
    std::vector<SplitMap> members(lv.size());
    std::vector<detail::Discovery> disc(lv.size());
    BubbleConfig inner_cfg = cfg;
    inner_cfg.threads = 1;
    parallel_for(
        lv.size(),
        [&](std::size_t i) {
            members[i] = seq.member(lv[i]);
            detail::Discovery& d = disc[i];
            if (centers.empty()) return;
            d.X1 = slice_select(members[i], Vec2::Zero(), centers.front(), inner_cfg).X1;
            for (std::size_t c = 0; c < centers.size(); ++c)
                detail::discover_cluster(members[i], d.X1, centers[c], cfg.window, 0, -1,
                                         "c" + std::to_string(c), inner_cfg, d);
        },
        cfg.threads);

    for (std::size_t i = 1; i < lv.size(); ++i) {
        const detail::Discovery& d = disc[i];
        const detail::Discovery& prev = disc[i - 1];
        BubbleTree tree;
        tree.level = lv[i];
        tree.diagnostics = d.diagnostics;
        TreeNode root;
        root.key = "root";
        if (!centers.empty()) root.center = centers.front();
        tree.nodes.push_back(root);
        std::vector<int> map(d.bubbles.size(), 0);
        for (std::size_t b = 0; b < d.bubbles.size(); ++b) {
            const auto& fb = d.bubbles[b];
            int parent = fb.parent >= 0 ? map[fb.parent] : 0;
            auto pm = std::find_if(prev.bubbles.begin(), prev.bubbles.end(),
                                   [&](const auto& q) { return q.key == fb.key; });
            ExtractedBubble ex;
            bool ok = pm != prev.bubbles.end();
            if (ok) {
                ex = rescale_and_extract({members[i - 1], members[i]}, {prev.X1, d.X1},
                                         {pm->conc, fb.conc}, Annulus{}, cfg, fb.energy);
                ok = ex.converged && ex.nonconstant;
                if (!ex.converged)
                    tree.diagnostics.push_back("bubble " + fb.key + ": rescaled members do not converge");
                else if (!ex.nonconstant)
                    tree.diagnostics.push_back("bubble " + fb.key + ": energy below eps0");
            } else {
                tree.diagnostics.push_back("bubble " + fb.key + ": no match in the previous member");
            }
            if (!ok) {
                map[b] = parent;
                tree.rejected_energy += fb.energy;
                continue;
            }
            TreeNode n;
            n.kind = TreeNode::Kind::bubble;
            n.center = fb.conc.x2;
            n.scale = fb.conc.delta;
            n.energy = fb.energy;
            n.structure = fb.structure;
            n.structure_residual = fb.structure_residual;
            n.convergence_gap = ex.profile_scale > 0 ? ex.sup_difference / ex.profile_scale : 0.0;
            n.parent = parent;
            n.key = fb.key;
            map[b] = static_cast<int>(tree.nodes.size());
            tree.nodes.push_back(n);
        }
        double necks = 0;
        for (const auto& fn : d.necks) {
            TreeNode n;
            n.kind = TreeNode::Kind::neck;
            n.center = fn.center;
            n.scale = fn.outer;
            n.inner = fn.inner;
            n.energy = std::max(fn.energy, 0.0);
            n.l2inf = fn.l2inf;
            n.parent = fn.parent >= 0 ? map[fn.parent] : 0;
            necks += n.energy;
            tree.nodes.push_back(n);
        }
        tree.residual_neck_energy = necks + std::max(tree.rejected_energy, 0.0);
        rep.levels.push_back(std::move(tree));
    }
    for (std::size_t k = 1; k < rep.levels.size(); ++k)
        if (rep.levels[k].residual_neck_energy > rep.levels[k - 1].residual_neck_energy * (1 + 1e-9))
            rep.residual_nonincreasing = false;

    const detail::Discovery& last = disc.back();
    for (std::size_t c = 0; c < centers.size(); ++c) {
        ClusterSummary cs;
        cs.point = centers[c];
        std::string prefix = "c" + std::to_string(c) + ".";
        // the innermost centred bubble sits closest to the limit point
        for (const auto& fb : last.bubbles)
            if (fb.key.rfind(prefix, 0) == 0) cs.point = fb.conc.x2;
        cs.theta = defect_density(seq, last.X1, cs.point, cfg);
        for (const auto& n : rep.levels.back().nodes)
            if (n.kind == TreeNode::Kind::bubble && n.key.rfind(prefix, 0) == 0) cs.sum_energy += n.energy;
        if (!cs.theta.reliable) rep.diagnostics.push_back("cluster " + prefix + ": " + cs.theta.reason);
        rep.theta += cs.theta.theta;
        rep.sum_energy += cs.sum_energy;
        rep.clusters.push_back(cs);
    }
    if (!rep.levels.empty()) rep.residual_neck_energy = rep.levels.back().residual_neck_energy;
    BubbleTree top = rep.levels.empty() ? BubbleTree{} : rep.levels.back();
    if (rep.levels.empty()) top.nodes.push_back(TreeNode{});
    return {top, rep};
}

}  // namespace fueterlab
