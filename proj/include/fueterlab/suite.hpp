#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fueterlab {

// Triholomorphic maps H^m -> H^n built from holomorphic functions.
//
// With z_p = x_{2p} + i x_{2p+1} on the domain and target slots
// (y_{2q}, y_{2q+1}) = (Re w_q, -Im w_q), any holomorphic w(z) gives a map
// with du i = -I du, and such maps are triholomorphic for left/left
// structures. Each w_q is a sum of terms c * z^alpha * exp(a . z).
class HolomorphicField {
public:
    struct Term {
        int slot = 0;                        // target complex coordinate, < 2n
        std::complex<double> coeff = 1;
        std::vector<int> power;              // exponent per domain coordinate, size 2m
        std::vector<std::complex<double>> rate;  // exp(rate . z), size 2m
        bool has_rate = false;
    };

    HolomorphicField(int m, int n) : m_(m), n_(n) {
        if (m < 1 || n < 1) throw std::invalid_argument("HolomorphicField: m, n >= 1");
    }

    int m() const { return m_; }
    int n() const { return n_; }
    const std::vector<Term>& terms() const { return terms_; }

    HolomorphicField& add(Term t) {
        if (t.slot < 0 || t.slot >= 2 * n_) throw std::invalid_argument("HolomorphicField: slot");
        t.power.resize(2 * m_, 0);
        t.rate.resize(2 * m_, 0.0);
        t.has_rate = false;
        for (auto r : t.rate) t.has_rate = t.has_rate || r != 0.0;
        terms_.push_back(std::move(t));
        return *this;
    }

    // polynomial-only random field of total degree <= deg
    static HolomorphicField random_polynomial(int m, int n, int deg, std::uint64_t seed,
                                              double scale = 1.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> N(0, scale);
        HolomorphicField f(m, n);
        for (int slot = 0; slot < 2 * n; ++slot) {
            std::vector<int> p(2 * m, 0);
            enumerate(p, 0, deg, [&](const std::vector<int>& pw) {
                f.add({slot, {N(rng), N(rng)}, pw, {}});
            });
        }
        return f;
    }

    // fixed quartic field with a handful of terms (cheap to evaluate)
    static HolomorphicField reference_quartic(int m, int n) {
        HolomorphicField f(m, n);
        int last = 2 * m - 1;
        for (int q = 0; q < 2 * n; ++q) {
            auto mono = [&](int a, int ea, int b, int eb) {
                std::vector<int> p(2 * m, 0);
                p[a] += ea;
                p[b] += eb;
                return p;
            };
            double s = 1.0 / (1 + q);
            f.add({q, {0.25 * s, 0.1}, mono(0, 4, 0, 0), {}});
            f.add({q, {0.5, -0.2 * s}, mono(0, 1, last, 2), {}});
            f.add({q, {0.8 * s, 0.3}, mono(last, 2, 0, 0), {}});
            f.add({q, {0.3 * (1 + q), 0.2}, mono(q % (2 * m), 1, 0, 0), {}});
        }
        return f;
    }

    // polynomial plus one exponential term per slot (non-polynomial, so
    // discrete Laplacians carry a genuine O(h^2) error)
    static HolomorphicField random_smooth(int m, int n, std::uint64_t seed, double scale = 1.0) {
        HolomorphicField f = random_polynomial(m, n, 2, seed, scale);
        std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
        std::normal_distribution<double> N(0, 1);
        for (int slot = 0; slot < 2 * n; ++slot) {
            Term t{slot, {scale * N(rng), scale * N(rng)}, {}, {}};
            for (int p = 0; p < 2 * m; ++p) t.rate.push_back({N(rng), N(rng)});
            f.add(t);
        }
        return f;
    }

    void operator()(const double* x, double* out) const {
        Coords z = coords(x);
        for (int c = 0; c < 4 * n_; ++c) out[c] = 0;
        for (const Term& t : terms_) {
            std::complex<double> w = t.coeff * monomial(t, z);
            if (t.has_rate) w *= std::exp(dot(t.rate, z));
            out[2 * t.slot] += w.real();
            out[2 * t.slot + 1] -= w.imag();
        }
    }

    Eigen::MatrixXd jacobian(const double* x) const {
        Coords z = coords(x);
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(4 * n_, 4 * m_);
        for (const Term& t : terms_) {
            std::complex<double> e = std::exp(dot(t.rate, z));
            std::complex<double> mono = monomial(t, z);
            for (int p = 0; p < 2 * m_; ++p) {
                std::complex<double> dm = 0;
                if (t.power[p] > 0) dm = double(t.power[p]) * monomial(t, z, p);
                std::complex<double> d = t.coeff * e * (dm + t.rate[p] * mono);
                // d/dx_{2p} = d/dz, d/dx_{2p+1} = i d/dz
                std::complex<double> dy = std::complex<double>(0, 1) * d;
                J(2 * t.slot, 2 * p) += d.real();
                J(2 * t.slot + 1, 2 * p) -= d.imag();
                J(2 * t.slot, 2 * p + 1) += dy.real();
                J(2 * t.slot + 1, 2 * p + 1) -= dy.imag();
            }
        }
        return J;
    }

private:
    template <class F>
    static void enumerate(std::vector<int>& p, int k, int left, F&& f) {
        if (k == static_cast<int>(p.size())) {
            f(p);
            return;
        }
        for (int d = 0; d <= left; ++d) {
            p[k] = d;
            enumerate(p, k + 1, left - d, f);
        }
        p[k] = 0;
    }

    struct Coords {
        std::complex<double> z[8];
        int size = 0;
    };
    Coords coords(const double* x) const {
        Coords c;
        c.size = 2 * m_;
        for (int p = 0; p < c.size; ++p) c.z[p] = {x[2 * p], x[2 * p + 1]};
        return c;
    }
    static std::complex<double> dot(const std::vector<std::complex<double>>& a, const Coords& z) {
        std::complex<double> s = 0;
        for (int p = 0; p < z.size; ++p)
            if (a[p] != 0.0) s += a[p] * z.z[p];
        return s;
    }
    // z^power, with the exponent of coordinate `lower` reduced by one
    static std::complex<double> monomial(const Term& t, const Coords& z, int lower = -1) {
        std::complex<double> s = 1;
        for (int p = 0; p < z.size; ++p) {
            int e = t.power[p] - (p == lower ? 1 : 0);
            for (int k = 0; k < e; ++k) s *= z.z[p];
        }
        return s;
    }

    int m_, n_;
    std::vector<Term> terms_;
};

struct NamedField {
    std::string name;
    HolomorphicField field;
};

// Fixed regression suite of triholomorphic fields.
inline std::vector<NamedField> triholomorphic_suite(int m, int n) {
    std::vector<NamedField> s;
    s.push_back({"reference_quartic", HolomorphicField::reference_quartic(m, n)});
    for (int deg = 1; deg <= 3; ++deg)
        for (std::uint64_t seed : {1u, 2u})
            s.push_back({"polynomial_d" + std::to_string(deg) + "_s" + std::to_string(seed),
                         HolomorphicField::random_polynomial(m, n, deg, seed, 0.5)});
    for (std::uint64_t seed : {1u, 2u, 3u})
        for (double scale : {0.3, 1.0})
            s.push_back({"smooth_s" + std::to_string(seed) + (scale < 1 ? "_small" : "_unit"),
                         HolomorphicField::random_smooth(m, n, seed, scale)});
    return s;
}

}  // namespace fueterlab
