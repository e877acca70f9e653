#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace hsplat {

template <class T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <class T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <class T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <class T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T> using Mat34 = Eigen::Matrix<T, 3, 4>;
template <class T> using Quat = Eigen::Quaternion<T>;

using Vec2f = Vec2<float>;
using Vec3f = Vec3<float>;
using Vec4f = Vec4<float>;
using Mat2f = Mat2<float>;
using Mat3f = Mat3<float>;
using Mat34f = Mat34<float>;
using Quatf = Quat<float>;

// Rasterizer / model constants.
inline constexpr int kTileSize = 16;
inline constexpr float kAlphaMin = 1.0f / 255.0f;   // contributions below this are skipped
inline constexpr float kAlphaMax = 0.99f;           // per-splat blend alpha clamp
inline constexpr float kTransmittanceEps = 1e-4f;   // front-to-back early termination
inline constexpr float kDilation2d = 0.3f;          // screen-space low-pass (px^2), with alpha compensation
inline constexpr float kNearPlane = 0.01f;          // meters
inline constexpr float kDefaultSigmaExtent = 3.0f;  // leaf AABB half-extent in standard deviations
inline constexpr int kShCoeffs = 16;                // degree 3
inline constexpr int kShValues = kShCoeffs * 3;

inline constexpr float kInf = std::numeric_limits<float>::infinity();

// World-axis-aligned box; min == max along an axis is allowed (flat box).
struct Aabb {
    Vec3f min{Vec3f::Constant(kInf)};
    Vec3f max{Vec3f::Constant(-kInf)};

    bool valid() const { return (min.array() <= max.array()).all(); }
    Vec3f center() const { return 0.5f * (min + max); }
    Vec3f extent() const { return max - min; }
    float largest_dim() const { return extent().maxCoeff(); }
    bool contains(const Vec3f& p) const {
        return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
    }
    bool contains(const Aabb& o) const {
        return (o.min.array() >= min.array()).all() && (o.max.array() <= max.array()).all();
    }
    void expand(const Vec3f& p) {
        min = min.cwiseMin(p);
        max = max.cwiseMax(p);
    }
    void expand(const Aabb& o) {
        min = min.cwiseMin(o.min);
        max = max.cwiseMax(o.max);
    }
    Aabb scaled_about_center(float s) const {
        Vec3f c = center(), h = 0.5f * s * extent();
        return Aabb{c - h, c + h};
    }
};

inline Aabb aabb_union(const Aabb& a, const Aabb& b) {
    Aabb u = a;
    u.expand(b);
    return u;
}

template <class T>
Vec3<T> to_vec3(const Vec3f& v) { return v.template cast<T>(); }

// Unit-quaternion sign alignment: q and -q encode the same rotation; pick the
// representative in the hemisphere of `ref` before lerping.
template <class T>
Vec4<T> quat_coeffs_wxyz(const Quat<T>& q) { return Vec4<T>(q.w(), q.x(), q.y(), q.z()); }

template <class T>
Quat<T> quat_from_wxyz(const Vec4<T>& v) { return Quat<T>(v[0], v[1], v[2], v[3]); }

template <class T>
Vec4<T> align_quat(const Vec4<T>& q, const Vec4<T>& ref) {
    return q.dot(ref) < T(0) ? Vec4<T>(-q) : q;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double y) { return std::log(y / (1.0 - y)); }

template <class T>
T clamp01(T v) { return std::min(T(1), std::max(T(0), v)); }

}  // namespace hsplat
