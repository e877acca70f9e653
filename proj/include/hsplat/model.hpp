#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "math.hpp"

namespace hsplat {

inline constexpr std::uint32_t kNoNode = 0xFFFFFFFFu;

// Anisotropic 3D Gaussian with degree-3 SH radiance.
// Covariance is kept factored: sigma = R * diag(scale)^2 * R^T.
// `falloff` is the opacity-like coverage weight: leaves carry plain opacity in
// (0,1]; merged interior nodes may exceed 1 (clamped only at blend time).
template <class T>
struct GaussianT {
    Vec3<T> mean = Vec3<T>::Zero();
    Vec3<T> scale = Vec3<T>::Ones();
    Quat<T> rotation = Quat<T>::Identity();
    T falloff = T(1);
    std::array<T, kShValues> sh{};  // sh[coeff*3 + channel], coeff 0..15

    T& sh_at(int coeff, int channel) { return sh[coeff * 3 + channel]; }
    T sh_at(int coeff, int channel) const { return sh[coeff * 3 + channel]; }

    Mat3<T> covariance() const {
        Mat3<T> r = rotation.toRotationMatrix();
        Mat3<T> m = r * scale.array().square().matrix().asDiagonal() * r.transpose();
        return T(0.5) * (m + m.transpose());  // exact symmetry despite float products
    }

    template <class U>
    GaussianT<U> cast() const {
        GaussianT<U> g;
        g.mean = mean.template cast<U>();
        g.scale = scale.template cast<U>();
        g.rotation = Quat<U>(U(rotation.w()), U(rotation.x()), U(rotation.y()), U(rotation.z()));
        g.falloff = U(falloff);
        for (int k = 0; k < kShValues; ++k) g.sh[k] = U(sh[k]);
        return g;
    }
};

using Gaussian = GaussianT<float>;

inline void validate_gaussian(const Gaussian& g) {
    require(g.mean.allFinite() && g.scale.allFinite() && std::isfinite(g.falloff),
            Errc::InvalidArgument, "gaussian has non-finite fields");
    require((g.scale.array() > 0.0f).all(), Errc::InvalidArgument, "gaussian scale must be > 0");
    require(std::abs(g.rotation.norm() - 1.0f) < 1e-3f, Errc::InvalidArgument,
            "gaussian rotation must be a unit quaternion");
    require(g.falloff >= 0.0f, Errc::InvalidArgument, "gaussian falloff must be >= 0");
}

// Pinhole camera. world_to_camera is [R|t] (row-major storage order when
// serialized); camera space looks down +z. exposure is a 3x4 affine color map
// applied to rendered RGB as E * [r g b 1]^T.
struct CameraModel {
    int width = 0, height = 0;
    Vec2f focal = Vec2f::Zero();
    Vec2f principal = Vec2f::Zero();
    Mat34f world_to_camera = Mat34f::Zero();
    Mat34f exposure = identity_exposure();

    static Mat34f identity_exposure() {
        Mat34f e = Mat34f::Zero();
        e.block<3, 3>(0, 0).setIdentity();
        return e;
    }

    Mat3f rotation() const { return world_to_camera.block<3, 3>(0, 0); }
    Vec3f translation() const { return world_to_camera.col(3); }
    Vec3f position() const { return -rotation().transpose() * translation(); }
    Vec3f to_camera(const Vec3f& p) const { return rotation() * p + translation(); }
    float max_focal() const { return std::max(focal.x(), focal.y()); }
};

inline void validate_camera(const CameraModel& c) {
    require(c.width > 0 && c.height > 0, Errc::InvalidArgument, "camera resolution must be positive");
    require(c.focal.x() > 0.0f && c.focal.y() > 0.0f, Errc::InvalidArgument, "camera focal must be positive");
    require(c.world_to_camera.allFinite(), Errc::InvalidArgument, "camera pose must be finite");
    Mat3f rrt = c.rotation() * c.rotation().transpose();
    require((rrt - Mat3f::Identity()).norm() < 1e-3f, Errc::InvalidArgument,
            "world_to_camera rotation block must be orthonormal");
}

struct HierarchyNode {
    std::uint32_t parent = kNoNode;
    std::uint32_t first_child = kNoNode;
    std::uint32_t child_count = 0;
    Aabb bounds;
    Gaussian g;

    bool is_leaf() const { return child_count == 0; }
};

// Flat tree; root at index 0, children of a node stored contiguously so the
// cut test for a node touches only (own bounds, parent bounds).
struct Hierarchy {
    std::vector<HierarchyNode> nodes;
    std::uint32_t sh_degree = 3;

    bool empty() const { return nodes.empty(); }
    std::size_t leaf_count() const {
        std::size_t n = 0;
        for (const auto& node : nodes) n += node.is_leaf();
        return n;
    }
};

// Structural invariants; used by tests and after load.
inline void validate_hierarchy(const Hierarchy& h) {
    require(!h.nodes.empty(), Errc::InvalidArgument, "hierarchy has no nodes");
    require(h.nodes[0].parent == kNoNode, Errc::InvalidArgument, "node 0 must be the root");
    for (std::size_t i = 0; i < h.nodes.size(); ++i) {
        const auto& n = h.nodes[i];
        if (i != 0)
            require(n.parent != kNoNode && n.parent < h.nodes.size(), Errc::InvalidArgument,
                    "non-root node must have a valid parent");
        require(n.bounds.valid(), Errc::InvalidArgument, "node bounds must be a valid box");
        validate_gaussian(n.g);
        if (n.is_leaf()) continue;
        require(n.first_child != kNoNode && n.first_child + n.child_count <= h.nodes.size(),
                Errc::InvalidArgument, "child range out of bounds");
        for (std::uint32_t c = 0; c < n.child_count; ++c) {
            const auto& child = h.nodes[n.first_child + c];
            require(child.parent == static_cast<std::uint32_t>(i), Errc::InvalidArgument,
                    "child parent back-pointer mismatch");
            require(n.bounds.contains(child.bounds), Errc::InvalidArgument,
                    "parent bounds must contain child bounds");
        }
    }
}

// One selected node of a level-of-detail cut. t in [0,1] blends the node
// between its parent's attributes (0) and its own (1); alpha_prime is the
// coverage weight that makes the K siblings reproduce the parent at t = 0.
struct CutEntry {
    std::uint32_t node = kNoNode;
    float t = 1.0f;
    float alpha_prime = 0.0f;
};

// Renderer input: shape/radiance attributes (already parent/child blended for
// cut entries; rotation may be a non-unit lerp output, the renderer
// normalizes) plus the transition state. The per-pixel blend alpha is
//   alpha = t * a_self + (1-t) * (1 - (1 - a_parent)^(1/K)),
// where a_self/a_parent use this splat's shape with falloff/parent_falloff,
// so the K siblings at t = 0 reproduce their parent exactly. Plain splats use
// t = 1 (parent term unused).
template <class T>
struct RenderSplatT {
    Vec3<T> mean = Vec3<T>::Zero();
    Vec3<T> scale = Vec3<T>::Ones();
    Vec4<T> rotation = Vec4<T>(1, 0, 0, 0);  // wxyz, not necessarily unit
    std::array<T, kShValues> sh{};
    T falloff = T(1);
    T parent_falloff = T(0);
    T t = T(1);
    int transition_siblings = 1;  // K

    static RenderSplatT plain(const GaussianT<T>& g) {
        RenderSplatT s;
        s.mean = g.mean;
        s.scale = g.scale;
        s.rotation = quat_coeffs_wxyz(g.rotation);
        s.sh = g.sh;
        s.falloff = g.falloff;
        return s;
    }
};

using RenderSplat = RenderSplatT<float>;

struct SfmObservation {
    std::uint32_t point = 0;  // index into SfmPointSet::positions
    Vec2f pixel = Vec2f::Zero();
    float inv_depth = 0.0f;
    float reproj_error = 0.0f;
};

struct SfmPointSet {
    std::vector<Vec3f> positions;
    std::map<int, std::vector<SfmObservation>> per_image;  // camera id -> observations
};

}  // namespace hsplat
