#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace fueterlab {

struct Quaternion {
    double w = 0, x = 0, y = 0, z = 0;

    static Quaternion one() { return {1, 0, 0, 0}; }
    static Quaternion unit_i() { return {0, 1, 0, 0}; }
    static Quaternion unit_j() { return {0, 0, 1, 0}; }
    static Quaternion unit_k() { return {0, 0, 0, 1}; }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
    Quaternion conj() const { return {w, -x, -y, -z}; }

    friend Quaternion operator+(const Quaternion& p, const Quaternion& q) {
        return {p.w + q.w, p.x + q.x, p.y + q.y, p.z + q.z};
    }
    friend Quaternion operator-(const Quaternion& p, const Quaternion& q) {
        return {p.w - q.w, p.x - q.x, p.y - q.y, p.z - q.z};
    }
    friend Quaternion operator*(double s, const Quaternion& q) {
        return {s * q.w, s * q.x, s * q.y, s * q.z};
    }
    friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

// Hamilton product
inline Quaternion quat_mul(const Quaternion& p, const Quaternion& q) {
    return {p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
            p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
            p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
            p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w};
}

inline Quaternion operator*(const Quaternion& p, const Quaternion& q) { return quat_mul(p, q); }

// 4x4 matrix of x -> p*x on R^4 = H
inline Eigen::Matrix4d left_matrix(const Quaternion& p) {
    Eigen::Matrix4d m;
    m << p.w, -p.x, -p.y, -p.z,
         p.x,  p.w, -p.z,  p.y,
         p.y,  p.z,  p.w, -p.x,
         p.z, -p.y,  p.x,  p.w;
    return m;
}

// 4x4 matrix of x -> x*p
inline Eigen::Matrix4d right_matrix(const Quaternion& p) {
    Eigen::Matrix4d m;
    m << p.w, -p.x, -p.y, -p.z,
         p.x,  p.w,  p.z, -p.y,
         p.y, -p.z,  p.w,  p.x,
         p.z,  p.y, -p.x,  p.w;
    return m;
}

enum class Unit { i = 0, j = 1, k = 2 };

struct SphereStructure {
    double a = 1, b = 0, c = 0;

    static SphereStructure normalized(double a, double b, double c) {
        double n = std::sqrt(a * a + b * b + c * c);
        if (n == 0) throw std::invalid_argument("SphereStructure: zero vector");
        return {a / n, b / n, c / n};
    }
    double norm_defect() const { return std::abs(a * a + b * b + c * c - 1.0); }
};

// Flat hypercomplex structure on R^{4d} = H^d acting by left multiplication
// on each quaternionic factor.
class StructureTriple {
public:
    explicit StructureTriple(int d = 1) : d_(d) {
        if (d < 1) throw std::invalid_argument("StructureTriple: d must be >= 1");
        const Quaternion units[3] = {Quaternion::unit_i(), Quaternion::unit_j(),
                                     Quaternion::unit_k()};
        for (int u = 0; u < 3; ++u) {
            mats_[u] = Eigen::MatrixXd::Zero(4 * d, 4 * d);
            Eigen::Matrix4d block = left_matrix(units[u]);
            for (int b = 0; b < d; ++b) mats_[u].block<4, 4>(4 * b, 4 * b) = block;
        }
    }

    int quaternionic_dim() const { return d_; }
    int real_dim() const { return 4 * d_; }
    const Eigen::MatrixXd& matrix(Unit u) const { return mats_[static_cast<int>(u)]; }
    const Eigen::MatrixXd& matrix(int u) const { return mats_[u]; }

    Eigen::MatrixXd combination(const SphereStructure& s) const {
        return s.a * mats_[0] + s.b * mats_[1] + s.c * mats_[2];
    }

private:
    int d_;
    std::array<Eigen::MatrixXd, 3> mats_;
};

inline Eigen::VectorXd apply_structure(const StructureTriple& S, const SphereStructure& s,
                                       const Eigen::VectorXd& v) {
    if (v.size() != S.real_dim())
        throw std::invalid_argument("apply_structure: dimension mismatch");
    return S.combination(s) * v;
}

}  // namespace fueterlab
