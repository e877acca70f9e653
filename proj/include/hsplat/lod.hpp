#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "model.hpp"
#include "parallel.hpp"

namespace hsplat {

// Projected screen-space size (px) of a node's bounds: largest box dimension
// over the depth of the box point nearest the camera. Nearest-point depth
// keeps granularity monotone along root-leaf paths (child box is contained,
// so it can never start closer), which the cut logic relies on. Returns +inf
// (forced refinement) when the camera is inside the box or closer than the
// near plane.
inline float granularity(const Aabb& bounds, const CameraModel& cam) {
    if (bounds.contains(cam.position())) return kInf;
    const Mat34f& w2c = cam.world_to_camera;
    float z = w2c(2, 3);
    for (int k = 0; k < 3; ++k)
        z += std::min(w2c(2, k) * bounds.min[k], w2c(2, k) * bounds.max[k]);
    if (z <= kNearPlane) return kInf;
    return cam.max_focal() * bounds.largest_dim() / z;
}

// Where the target granularity sits between a node's own size and its
// parent's. 1 = node renders with its own attributes, 0 = with its parent's.
// The weight hits 0 exactly when the parent is about to take over (tau at the
// parent's granularity), so the handoff is seamless in both directions; a
// node whose own granularity already exceeds tau (an over-coarse leaf) clamps
// to 1 and renders as itself.
inline float interp_weight(float eps_node, float eps_parent, float tau) {
    if (eps_parent == eps_node || eps_parent == kInf) return 1.0f;
    return clamp01((eps_parent - tau) / (eps_parent - eps_node));
}

// Per-sibling blend weight that makes K siblings over the same pixel
// accumulate to exactly the parent's alpha: 1 - (1 - a_p)^(1/K).
inline float transition_alpha(float parent_alpha, int siblings) {
    require(siblings >= 1, Errc::InvalidArgument, "transition_alpha needs K >= 1");
    float a = std::min(std::max(parent_alpha, 0.0f), kAlphaMax);
    return 1.0f - std::pow(1.0f - a, 1.0f / static_cast<float>(siblings));
}

// Level-of-detail cut: a node is selected when it is fine enough (or a leaf,
// which terminates refinement) while its parent is not. Pure per-node test on
// (own bounds, parent bounds); linear in node count. Granularities are
// precomputed in one sequential sweep so the per-node parent check reads a
// packed float array rather than chasing the far-away parent record.
inline std::vector<CutEntry> select_cut(const Hierarchy& h, const CameraModel& cam, float tau) {
    require(tau >= 0.0f && !h.empty(), Errc::InvalidArgument, "select_cut needs tau >= 0 and nodes");
    const std::size_t n = h.nodes.size();
    std::vector<float> eps(n);
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) eps[i] = granularity(h.nodes[i].bounds, cam);
    });

    std::vector<unsigned char> in_cut(n, 0);
    std::vector<float> t_of(n, 1.0f);
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const HierarchyNode& node = h.nodes[i];
            bool fine_enough = eps[i] <= tau;
            if (!fine_enough && !node.is_leaf()) continue;
            float t = 1.0f;
            if (node.parent != kNoNode) {
                float eps_p = eps[node.parent];
                if (!(eps_p > tau)) continue;  // parent already fine enough
                t = interp_weight(eps[i], eps_p, tau);
            }
            in_cut[i] = 1;
            t_of[i] = t;
        }
    });

    std::vector<CutEntry> cut;
    for (std::size_t i = 0; i < n; ++i) {
        if (!in_cut[i]) continue;
        CutEntry e;
        e.node = static_cast<std::uint32_t>(i);
        e.t = t_of[i];
        if (h.nodes[i].parent != kNoNode) {
            const HierarchyNode& p = h.nodes[h.nodes[i].parent];
            e.alpha_prime = transition_alpha(std::min(p.g.falloff, kAlphaMax),
                                             static_cast<int>(p.child_count));
        }
        cut.push_back(e);
    }
    return cut;
}

// Parent/child attribute blend at weight t. The falloff channel lands on the
// transition weight alpha' at t = 0 so the siblings jointly reproduce the
// parent; at t = 1 this is exactly the child.
inline Gaussian interpolated_gaussian(const Gaussian& child, const Gaussian& parent, float t,
                                      int siblings) {
    float u = clamp01(t);
    Gaussian out;
    out.mean = u * child.mean + (1.0f - u) * parent.mean;
    out.scale = u * child.scale + (1.0f - u) * parent.scale;
    Vec4f qc = align_quat(quat_coeffs_wxyz(child.rotation), quat_coeffs_wxyz(parent.rotation));
    Vec4f q = u * qc + (1.0f - u) * quat_coeffs_wxyz(parent.rotation);
    out.rotation = quat_from_wxyz(q.normalized());
    for (int k = 0; k < kShValues; ++k) out.sh[k] = u * child.sh[k] + (1.0f - u) * parent.sh[k];
    out.falloff = u * child.falloff +
                  (1.0f - u) * transition_alpha(std::min(parent.falloff, kAlphaMax), siblings);
    return out;
}

// Expand a cut into renderer inputs, blending each selected node's shape with
// its parent's at the entry's t. Attributes are read from `attrs` (parallel
// to h.nodes) so refinement can run the same assembly over its trainable
// parameter copies at any precision.
template <class T>
std::vector<RenderSplatT<T>> assemble_cut_splats(const Hierarchy& h,
                                                 std::span<const GaussianT<T>> attrs,
                                                 std::span<const CutEntry> cut) {
    require(attrs.size() == h.nodes.size(), Errc::DimensionMismatch,
            "attribute array must parallel hierarchy nodes");
    std::vector<RenderSplatT<T>> out;
    out.reserve(cut.size());
    for (const CutEntry& e : cut) {
        const HierarchyNode& node = h.nodes[e.node];
        const GaussianT<T>& g = attrs[e.node];
        if (node.parent == kNoNode || e.t >= 1.0f) {
            out.push_back(RenderSplatT<T>::plain(g));
            continue;
        }
        const GaussianT<T>& p = attrs[node.parent];
        const T u = T(e.t);
        RenderSplatT<T> s;
        s.mean = u * g.mean + (T(1) - u) * p.mean;
        s.scale = u * g.scale + (T(1) - u) * p.scale;
        Vec4<T> qc = align_quat(quat_coeffs_wxyz(g.rotation), quat_coeffs_wxyz(p.rotation));
        s.rotation = u * qc + (T(1) - u) * quat_coeffs_wxyz(p.rotation);  // renderer normalizes
        for (int k = 0; k < kShValues; ++k) s.sh[k] = u * g.sh[k] + (T(1) - u) * p.sh[k];
        s.falloff = g.falloff;
        s.parent_falloff = p.falloff;
        s.t = e.t;
        s.transition_siblings = static_cast<int>(h.nodes[node.parent].child_count);
        out.push_back(s);
    }
    return out;
}

inline std::vector<RenderSplat> cut_render_splats(const Hierarchy& h, std::span<const CutEntry> cut) {
    std::vector<Gaussian> attrs;
    attrs.reserve(h.nodes.size());
    for (const auto& n : h.nodes) attrs.push_back(n.g);
    return assemble_cut_splats<float>(h, attrs, cut);
}

}  // namespace hsplat
