#pragma once

#include <hsplat/merge.hpp>
#include <hsplat/model.hpp>

#include <cmath>
#include <random>
#include <span>
#include <vector>

// Shared test fixtures and independent oracles (numeric integration,
// Monte-Carlo sampling). Everything is seeded and deterministic.
namespace fixtures {

using Rng = std::mt19937_64;
using hsplat::Gaussian;
using hsplat::Quatf;
using hsplat::Vec3f;

inline float uniform(Rng& rng, float lo, float hi) {
    return std::uniform_real_distribution<float>(lo, hi)(rng);
}

inline Vec3f uniform_vec3(Rng& rng, float lo, float hi) {
    return Vec3f(uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi));
}

inline Quatf random_quat(Rng& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    Quatf q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q;
}

inline Gaussian random_gaussian(Rng& rng, float mean_spread = 2.0f, float scale_min = 0.3f,
                                float scale_max = 1.5f, float falloff_min = 0.1f,
                                float falloff_max = 1.0f) {
    Gaussian g;
    g.mean = uniform_vec3(rng, -mean_spread, mean_spread);
    g.scale = uniform_vec3(rng, scale_min, scale_max);
    g.rotation = random_quat(rng);
    g.falloff = uniform(rng, falloff_min, falloff_max);
    for (auto& v : g.sh) v = uniform(rng, -0.5f, 0.5f);
    return g;
}

// Midpoint-rule surface integral of an ellipsoid with semi-axes (a,b,c).
// Integrand: |r_theta x r_phi| = sin(t)*sqrt(b^2c^2 sin^2 t cos^2 p
//   + a^2c^2 sin^2 t sin^2 p + a^2b^2 cos^2 t).
inline double numeric_ellipsoid_surface(const Vec3f& scale, int n_theta = 1024, int n_phi = 1024) {
    const double a = scale.x(), b = scale.y(), c = scale.z();
    const double dt = M_PI / n_theta, dp = 2.0 * M_PI / n_phi;
    double sum = 0.0;
    for (int i = 0; i < n_theta; ++i) {
        double t = (i + 0.5) * dt;
        double st = std::sin(t), ct = std::cos(t);
        double row = 0.0;
        for (int j = 0; j < n_phi; ++j) {
            double p = (j + 0.5) * dp;
            double cp = std::cos(p), sp = std::sin(p);
            row += std::sqrt(b * b * c * c * st * st * cp * cp + a * a * c * c * st * st * sp * sp +
                             a * a * b * b * ct * ct);
        }
        sum += st * row;
    }
    return sum * dt * dp;
}

struct MixtureMoments {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
};

// Draw from the weighted Gaussian mixture and report sample mean/covariance.
inline MixtureMoments mc_mixture_moments(std::span<const Gaussian> children,
                                         std::span<const double> weights, std::size_t samples,
                                         Rng& rng) {
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    std::normal_distribution<double> n(0.0, 1.0);

    std::vector<Eigen::Matrix3d> bases;
    bases.reserve(children.size());
    for (const auto& c : children)
        bases.push_back(c.rotation.toRotationMatrix().cast<double>() *
                        c.scale.cast<double>().asDiagonal());

    MixtureMoments m;
    Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
    for (std::size_t s = 0; s < samples; ++s) {
        int i = pick(rng);
        Eigen::Vector3d z(n(rng), n(rng), n(rng));
        Eigen::Vector3d x = children[i].mean.cast<double>() + bases[i] * z;
        m.mean += x;
        second += x * x.transpose();
    }
    m.mean /= static_cast<double>(samples);
    m.cov = second / static_cast<double>(samples) - m.mean * m.mean.transpose();
    return m;
}

// Proper-rotation look-at camera: +z forward, +x right, +y = z cross x.
inline hsplat::CameraModel look_at_camera(const Vec3f& pos, const Vec3f& target, int width,
                                          int height, float focal,
                                          const Vec3f& up = Vec3f(0.0f, 1.0f, 0.0f)) {
    Vec3f zc = (target - pos).normalized();
    Vec3f xc = up.cross(zc);
    if (xc.norm() < 1e-5f) xc = Vec3f(1.0f, 0.0f, 0.0f);
    xc.normalize();
    Vec3f yc = zc.cross(xc);

    hsplat::CameraModel cam;
    cam.width = width;
    cam.height = height;
    cam.focal = hsplat::Vec2f(focal, focal);
    cam.principal = hsplat::Vec2f(width * 0.5f, height * 0.5f);
    cam.world_to_camera.block<1, 3>(0, 0) = xc.transpose();
    cam.world_to_camera.block<1, 3>(1, 0) = yc.transpose();
    cam.world_to_camera.block<1, 3>(2, 0) = zc.transpose();
    cam.world_to_camera.col(3) = -(cam.rotation() * pos);
    return cam;
}

}  // namespace fixtures
