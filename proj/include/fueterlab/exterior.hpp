#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "quat.hpp"

namespace fueterlab {

namespace detail {

constexpr int kMaxAmbient = 16;

// increasing multi-indices of size k in [0,n), encoded as bitmasks, lexicographic
struct IndexTable {
    std::vector<std::uint32_t> masks;
    std::vector<int> position;  // mask -> slot, -1 if not of size k
};

inline const IndexTable& index_table(int n, int k) {
    static std::vector<IndexTable> cache((kMaxAmbient + 1) * (kMaxAmbient + 1));
    static std::vector<bool> ready((kMaxAmbient + 1) * (kMaxAmbient + 1), false);
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    int key = n * (kMaxAmbient + 1) + k;
    if (!ready[key]) {
        IndexTable t;
        t.position.assign(std::size_t(1) << n, -1);
        std::vector<int> idx(k);
        for (int i = 0; i < k; ++i) idx[i] = i;
        while (true) {
            std::uint32_t m = 0;
            for (int i : idx) m |= 1u << i;
            t.position[m] = static_cast<int>(t.masks.size());
            t.masks.push_back(m);
            int p = k - 1;
            while (p >= 0 && idx[p] == n - k + p) --p;
            if (p < 0) break;
            ++idx[p];
            for (int q = p + 1; q < k; ++q) idx[q] = idx[q - 1] + 1;
        }
        cache[key] = std::move(t);
        ready[key] = true;
    }
    return cache[key];
}

inline std::vector<int> bits_of(std::uint32_t m) {
    std::vector<int> out;
    while (m) {
        int b = std::countr_zero(m);
        out.push_back(b);
        m &= m - 1;
    }
    return out;
}

// sign of the shuffle placing the indices of a before those of b
inline int merge_sign(std::uint32_t a, std::uint32_t b) {
    int inversions = 0;
    while (b) {
        int j = std::countr_zero(b);
        inversions += std::popcount(a >> (j + 1));
        b &= b - 1;
    }
    return (inversions & 1) ? -1 : 1;
}

}  // namespace detail

class KForm {
public:
    KForm() = default;
    KForm(int ambient, int degree) : n_(ambient), k_(degree) {
        if (ambient < 1 || ambient > detail::kMaxAmbient)
            throw std::invalid_argument("KForm: ambient dimension out of range");
        if (degree < 0 || degree > ambient) throw std::invalid_argument("KForm: degree overflow");
        coeffs_.assign(detail::index_table(n_, k_).masks.size(), 0.0);
    }

    static KForm scalar(int ambient, double c) {
        KForm f(ambient, 0);
        f.coeffs_[0] = c;
        return f;
    }
    static KForm basis(int ambient, const std::vector<int>& idx) {
        std::vector<int> s = idx;
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) != s.end())
            return KForm(ambient, static_cast<int>(idx.size()));
        KForm f(ambient, static_cast<int>(idx.size()));
        // sign of the permutation sorting idx
        int inv = 0;
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = a + 1; b < idx.size(); ++b)
                if (idx[a] > idx[b]) ++inv;
        std::uint32_t m = 0;
        for (int i : idx) m |= 1u << i;
        f.at_mask(m) = (inv & 1) ? -1.0 : 1.0;
        return f;
    }
    static KForm one_form(const Eigen::VectorXd& v) {
        KForm f(static_cast<int>(v.size()), 1);
        for (int i = 0; i < v.size(); ++i) f.coeffs_[i] = v[i];
        return f;
    }

    int ambient() const { return n_; }
    int degree() const { return k_; }
    std::size_t size() const { return coeffs_.size(); }
    const std::vector<std::uint32_t>& masks() const { return detail::index_table(n_, k_).masks; }
    double& coeff(std::size_t slot) { return coeffs_[slot]; }
    double coeff(std::size_t slot) const { return coeffs_[slot]; }
    double& at_mask(std::uint32_t m) {
        int p = detail::index_table(n_, k_).position[m];
        if (p < 0) throw std::invalid_argument("KForm: mask degree mismatch");
        return coeffs_[p];
    }
    double at_mask(std::uint32_t m) const { return const_cast<KForm*>(this)->at_mask(m); }

    KForm& operator+=(const KForm& o) {
        check_same(o);
        for (std::size_t i = 0; i < coeffs_.size(); ++i) coeffs_[i] += o.coeffs_[i];
        return *this;
    }
    KForm& operator-=(const KForm& o) {
        check_same(o);
        for (std::size_t i = 0; i < coeffs_.size(); ++i) coeffs_[i] -= o.coeffs_[i];
        return *this;
    }
    KForm& operator*=(double s) {
        for (double& c : coeffs_) c *= s;
        return *this;
    }
    friend KForm operator+(KForm a, const KForm& b) { return a += b; }
    friend KForm operator-(KForm a, const KForm& b) { return a -= b; }
    friend KForm operator*(double s, KForm a) { return a *= s; }

    double max_abs() const {
        double m = 0;
        for (double c : coeffs_) m = std::max(m, std::abs(c));
        return m;
    }

    // a(v_1, ..., v_k) with the vectors as columns of V
    double evaluate(const Eigen::MatrixXd& V) const {
        if (V.rows() != n_ || V.cols() != k_)
            throw std::invalid_argument("KForm::evaluate: shape mismatch");
        if (k_ == 0) return coeffs_[0];
        const auto& ms = masks();
        double s = 0;
        Eigen::MatrixXd sub(k_, k_);
        for (std::size_t p = 0; p < ms.size(); ++p) {
            if (coeffs_[p] == 0) continue;
            auto rows = detail::bits_of(ms[p]);
            for (int r = 0; r < k_; ++r) sub.row(r) = V.row(rows[r]);
            s += coeffs_[p] * sub.determinant();
        }
        return s;
    }

    // value on the standard volume e_1 ^ ... ^ e_n (top degree only)
    double on_volume() const {
        if (k_ != n_) throw std::invalid_argument("KForm::on_volume: not a top form");
        return coeffs_[0];
    }

private:
    void check_same(const KForm& o) const {
        if (o.n_ != n_ || o.k_ != k_) throw std::invalid_argument("KForm: shape mismatch");
    }
    int n_ = 1, k_ = 0;
    std::vector<double> coeffs_ = {0.0};
};

inline KForm wedge(const KForm& a, const KForm& b) {
    if (a.ambient() != b.ambient()) throw std::invalid_argument("wedge: ambient mismatch");
    int k = a.degree() + b.degree();
    if (k > a.ambient()) throw std::invalid_argument("wedge: degree overflow");
    KForm out(a.ambient(), k);
    const auto& ma = a.masks();
    const auto& mb = b.masks();
    for (std::size_t i = 0; i < ma.size(); ++i) {
        double ca = a.coeff(i);
        if (ca == 0) continue;
        for (std::size_t j = 0; j < mb.size(); ++j) {
            double cb = b.coeff(j);
            if (cb == 0 || (ma[i] & mb[j])) continue;
            out.at_mask(ma[i] | mb[j]) += detail::merge_sign(ma[i], mb[j]) * ca * cb;
        }
    }
    return out;
}

inline KForm wedge_power(const KForm& a, int p) {
    if (p < 0) throw std::invalid_argument("wedge_power: negative exponent");
    if (p * a.degree() > a.ambient()) throw std::invalid_argument("wedge_power: degree overflow");
    KForm out = KForm::scalar(a.ambient(), 1.0);
    for (int i = 0; i < p; ++i) out = wedge(out, a);
    return out;
}

inline KForm contract(const Eigen::VectorXd& X, const KForm& a) {
    if (a.degree() < 1) throw std::invalid_argument("contract: degree 0 input");
    if (X.size() != a.ambient()) throw std::invalid_argument("contract: dimension mismatch");
    KForm out(a.ambient(), a.degree() - 1);
    const auto& ms = a.masks();
    for (std::size_t p = 0; p < ms.size(); ++p) {
        double c = a.coeff(p);
        if (c == 0) continue;
        auto idx = detail::bits_of(ms[p]);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            double sgn = (r & 1) ? -1.0 : 1.0;
            out.at_mask(ms[p] & ~(1u << idx[r])) += sgn * X[idx[r]] * c;
        }
    }
    return out;
}

// (A^* Omega)(X_1..X_k) = Omega(A X_1, ..., A X_k), A : R^m -> R^n
inline KForm pullback(const Eigen::MatrixXd& A, const KForm& omega) {
    if (A.rows() != omega.ambient()) throw std::invalid_argument("pullback: dimension mismatch");
    int m = static_cast<int>(A.cols());
    int k = omega.degree();
    KForm out(m, k);
    if (k == 0) {
        out.coeff(0) = omega.coeff(0);
        return out;
    }
    const auto& ms = out.masks();
    Eigen::MatrixXd V(A.rows(), k);
    for (std::size_t p = 0; p < ms.size(); ++p) {
        auto idx = detail::bits_of(ms[p]);
        for (int c = 0; c < k; ++c) V.col(c) = A.col(idx[c]);
        out.coeff(p) = omega.evaluate(V);
    }
    return out;
}

// omega(X, Y) = g(X, S Y) for the flat metric
inline KForm two_form_from_matrix(const Eigen::MatrixXd& W) {
    int n = static_cast<int>(W.rows());
    KForm f(n, 2);
    for (int p = 0; p < n; ++p)
        for (int q = p + 1; q < n; ++q) f.at_mask((1u << p) | (1u << q)) = W(p, q);
    return f;
}

inline KForm kaehler_form(const StructureTriple& S, Unit which) {
    return two_form_from_matrix(S.matrix(which));
}

inline KForm kaehler_form(const StructureTriple& S, const SphereStructure& s) {
    return two_form_from_matrix(S.combination(s));
}

inline KForm radial_one_form(const Eigen::VectorXd& x) {
    double r = x.norm();
    if (r == 0) throw std::invalid_argument("radial form undefined at x = 0");
    return KForm::one_form(x / r);
}

// a_tan = a - dr ^ i_{d_r} a
inline KForm tangential_part(const KForm& a, const Eigen::VectorXd& x) {
    double r = x.norm();
    if (r == 0) throw std::invalid_argument("tangential_part: x = 0");
    if (a.degree() == 0) return a;
    Eigen::VectorXd dr = x / r;
    return a - wedge(KForm::one_form(dr), contract(dr, a));
}

// the form (u_1..u_{n-2}) -> det[v, w, u_1, ..., u_{n-2}]
inline KForm hodge_of_bivector(const Eigen::VectorXd& v, const Eigen::VectorXd& w) {
    int n = static_cast<int>(v.size());
    KForm f(n, n - 2);
    const auto& ms = f.masks();
    Eigen::MatrixXd M(n, n);
    M.col(0) = v;
    M.col(1) = w;
    for (std::size_t p = 0; p < ms.size(); ++p) {
        auto idx = detail::bits_of(ms[p]);
        for (int c = 0; c < n - 2; ++c) M.col(2 + c) = Eigen::VectorXd::Unit(n, idx[c]);
        f.coeff(p) = M.determinant();
    }
    return f;
}

// exterior derivative at x of a form field, central differences with step h
inline KForm exterior_derivative_fd(const std::function<KForm(const Eigen::VectorXd&)>& beta,
                                    const Eigen::VectorXd& x, double h) {
    int n = static_cast<int>(x.size());
    KForm b0 = beta(x);
    int k = b0.degree();
    if (k + 1 > n) throw std::invalid_argument("exterior_derivative_fd: degree overflow");
    std::vector<KForm> partial;
    partial.reserve(n);
    for (int a = 0; a < n; ++a) {
        Eigen::VectorXd xp = x, xm = x;
        xp[a] += h;
        xm[a] -= h;
        partial.push_back((1.0 / (2 * h)) * (beta(xp) - beta(xm)));
    }
    KForm out(n, k + 1);
    const auto& ms = out.masks();
    for (std::size_t p = 0; p < ms.size(); ++p) {
        auto idx = detail::bits_of(ms[p]);
        double s = 0;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            double sgn = (r & 1) ? -1.0 : 1.0;
            std::uint32_t rest = ms[p] & ~(1u << idx[r]);
            s += sgn * (k == 0 ? partial[idx[r]].coeff(0) : partial[idx[r]].at_mask(rest));
        }
        out.coeff(p) = s;
    }
    return out;
}

inline double factorial(int p) {
    double f = 1;
    for (int i = 2; i <= p; ++i) f *= i;
    return f;
}

// |d(i_{x dx} alpha^{2m-1} / |x|^e) - expected| on the probe, with e = 4m-2
// (plain identity) or e = 4m-3 (weighted variant). A probe of 4m-1 vectors is
// reduced to the maximum over its (4m-2)-element subsets.
inline double radial_scaling_defect(const StructureTriple& S, Unit which,
                                    const Eigen::VectorXd& x, const Eigen::MatrixXd& probe,
                                    double h, bool weighted = false) {
    int n = S.real_dim();
    int m = S.quaternionic_dim();
    if (x.size() != n) throw std::invalid_argument("radial_scaling_defect: dimension mismatch");
    double r = x.norm();
    if (r == 0) throw std::invalid_argument("radial_scaling_defect: x = 0");
    int deg = 4 * m - 2;
    if (probe.rows() != n || (probe.cols() != deg && probe.cols() != deg + 1))
        throw std::invalid_argument("radial_scaling_defect: probe shape");

    KForm power = wedge_power(kaehler_form(S, which), 2 * m - 1);
    double e = weighted ? 4 * m - 3 : 4 * m - 2;
    auto beta = [&](const Eigen::VectorXd& y) {
        return (1.0 / std::pow(y.norm(), e)) * contract(y, power);
    };
    KForm lhs = exterior_derivative_fd(beta, x, h);
    KForm tan = tangential_part(power, x);
    KForm rhs = weighted ? (r / std::pow(r, 4 * m - 2)) * (power + double(4 * m - 3) * tan)
                         : (double(4 * m - 2) / std::pow(r, 4 * m - 2)) * tan;
    KForm diff = lhs - rhs;
    if (probe.cols() == deg) return std::abs(diff.evaluate(probe));
    double worst = 0;
    for (int drop = 0; drop <= deg; ++drop) {
        Eigen::MatrixXd sub(n, deg);
        for (int c = 0, t = 0; c <= deg; ++c)
            if (c != drop) sub.col(t++) = probe.col(c);
        worst = std::max(worst, std::abs(diff.evaluate(sub)));
    }
    return worst;
}

}  // namespace fueterlab
