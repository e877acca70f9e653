#pragma once

#include <Eigen/Eigenvalues>
#include <cmath>
#include <span>
#include <vector>

#include "model.hpp"

namespace hsplat {

inline Mat3f compose_covariance(const Vec3f& scale, const Quatf& rotation) {
    Mat3f r = rotation.normalized().toRotationMatrix();
    Mat3f m = r * scale.array().square().matrix().asDiagonal() * r.transpose();
    return 0.5f * (m + m.transpose());
}

// Thomsen's closed-form ellipsoid surface approximation (p = 1.6075,
// max error ~1.1% for extreme aspect ratios, far less for moderate ones).
inline double ellipsoid_surface(const Vec3f& scale) {
    constexpr double p = 1.6075;
    double a = std::pow(static_cast<double>(scale.x()), p);
    double b = std::pow(static_cast<double>(scale.y()), p);
    double c = std::pow(static_cast<double>(scale.z()), p);
    return 4.0 * M_PI * std::pow((a * b + a * c + b * c) / 3.0, 1.0 / p);
}

struct DecomposedCovariance {
    Vec3f scale;      // sqrt of eigenvalues, sorted descending
    Quatf rotation;   // right-handed eigenbasis
};

// Eigendecomposition of a symmetric positive definite covariance back into
// (scale, rotation). Any valid axis convention reproduces the input; this one
// fixes descending scales and det(R) = +1.
inline DecomposedCovariance decompose_covariance(const Mat3f& sigma) {
    float mag = std::max(1.0f, sigma.cwiseAbs().maxCoeff());
    require((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-8f * mag + 1e-12f,
            Errc::NotSPD, "covariance is not symmetric");
    Mat3f sym = 0.5f * (sigma + sigma.transpose());
    Eigen::SelfAdjointEigenSolver<Mat3f> eig(sym);
    require(eig.info() == Eigen::Success, Errc::NotSPD, "eigendecomposition failed");

    Vec3f evals = eig.eigenvalues();    // ascending
    Mat3f evecs = eig.eigenvectors();
    require(evals.minCoeff() > 0.0f, Errc::NotSPD, "covariance has a non-positive eigenvalue");

    Mat3f r;
    Vec3f s;
    for (int i = 0; i < 3; ++i) {       // reverse to descending
        s[i] = std::sqrt(evals[2 - i]);
        r.col(i) = evecs.col(2 - i);
    }
    if (r.determinant() < 0.0f) r.col(2) = -r.col(2);
    return {s, Quatf(r).normalized()};
}

struct MergeWeights {
    std::vector<double> raw;         // falloff_i * surface_i
    std::vector<double> normalized;  // sums to 1; uniform fallback when all raw are 0
    double raw_sum = 0.0;
    bool all_zero = false;
};

// Contribution weights: opacity times ellipsoid surface. A splat's visual
// contribution scales with the area it can cover rather than its volume.
inline MergeWeights merge_weights(std::span<const Gaussian> children) {
    require(!children.empty(), Errc::InvalidArgument, "merge_weights needs at least one child");
    MergeWeights w;
    w.raw.reserve(children.size());
    for (const auto& c : children) w.raw.push_back(static_cast<double>(c.falloff) * ellipsoid_surface(c.scale));
    for (double r : w.raw) w.raw_sum += r;
    w.normalized.resize(children.size());
    if (w.raw_sum <= 0.0) {
        w.all_zero = true;  // degenerate (all-transparent) group: fall back to uniform
        std::fill(w.normalized.begin(), w.normalized.end(), 1.0 / children.size());
    } else {
        for (std::size_t i = 0; i < w.raw.size(); ++i) w.normalized[i] = w.raw[i] / w.raw_sum;
    }
    return w;
}

// Moment-matched merge: the merged Gaussian matches the mixture's first and
// second moments; SH merges linearly with the same weights; falloff preserves
// total weighted coverage relative to the merged surface (may exceed 1).
inline Gaussian merge_gaussians(std::span<const Gaussian> children) {
    require(!children.empty(), Errc::InvalidArgument, "merge_gaussians needs at least one child");
    MergeWeights w = merge_weights(children);

    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < children.size(); ++i)
        mean += w.normalized[i] * children[i].mean.cast<double>();

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < children.size(); ++i) {
        Eigen::Vector3d d = children[i].mean.cast<double>() - mean;
        cov += w.normalized[i] * (children[i].covariance().cast<double>() + d * d.transpose());
    }

    Mat3f cov_f = cov.cast<float>();
    Eigen::SelfAdjointEigenSolver<Mat3f> probe(0.5f * (cov_f + cov_f.transpose()));
    if (probe.info() == Eigen::Success && probe.eigenvalues().minCoeff() < 1e-12f)
        cov_f += 1e-12f * Mat3f::Identity();

    DecomposedCovariance dec = decompose_covariance(cov_f);

    Gaussian out;
    out.mean = mean.cast<float>();
    out.scale = dec.scale;
    out.rotation = dec.rotation;
    for (int k = 0; k < kShValues; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < children.size(); ++i) acc += w.normalized[i] * children[i].sh[k];
        out.sh[k] = static_cast<float>(acc);
    }
    out.falloff = static_cast<float>(w.raw_sum / ellipsoid_surface(out.scale));
    return out;
}

namespace detail {

// The 24 rotations of the axis frame: signed permutation matrices, det +1.
inline const std::vector<Mat3f>& axis_reinterpretations() {
    static const std::vector<Mat3f> table = [] {
        std::vector<Mat3f> t;
        int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
        for (auto& perm : perms)
            for (int sx = -1; sx <= 1; sx += 2)
                for (int sy = -1; sy <= 1; sy += 2)
                    for (int sz = -1; sz <= 1; sz += 2) {
                        int sign[3] = {sx, sy, sz};
                        Mat3f m = Mat3f::Zero();
                        for (int col = 0; col < 3; ++col) m(perm[col], col) = static_cast<float>(sign[col]);
                        if (m.determinant() > 0.5f) t.push_back(m);
                    }
        return t;
    }();
    return table;
}

}  // namespace detail

// Re-express (scale, rotation) in the equivalent axis convention whose
// quaternion lies closest to the parent's, so parent/child attribute lerps
// interpolate between matching axes. Covariance is unchanged.
inline Gaussian match_orientation(const Gaussian& child, const Quatf& parent_rotation) {
    Vec4f pref = quat_coeffs_wxyz(parent_rotation);
    Mat3f r = child.rotation.toRotationMatrix();

    float best_score = -1.0f;
    Quatf best_q = child.rotation;
    Vec3f best_s = child.scale;
    for (const Mat3f& p : detail::axis_reinterpretations()) {
        Quatf q(Mat3f(r * p));
        float score = std::abs(quat_coeffs_wxyz(q).dot(pref));
        if (score > best_score) {
            Vec3f s;
            for (int col = 0; col < 3; ++col) {
                for (int row = 0; row < 3; ++row)
                    if (p(row, col) != 0.0f) s[col] = child.scale[row];
            }
            best_score = score;
            best_q = q.normalized();
            best_s = s;
        }
    }
    if (quat_coeffs_wxyz(best_q).dot(pref) < 0.0f) best_q.coeffs() = -best_q.coeffs();

    Gaussian out = child;
    out.rotation = best_q;
    out.scale = best_s;
    return out;
}

}  // namespace hsplat
