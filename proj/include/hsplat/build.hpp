#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "lod.hpp"
#include "merge.hpp"
#include "model.hpp"

namespace hsplat {

struct BuildConfig {
    float sigma_extent = kDefaultSigmaExtent;  // leaf box half-extent in std deviations
};

// Tight world-axis box of the sigma_extent isosurface ellipsoid:
// half extent along axis k is sigma_extent * sqrt(Sigma_kk).
inline Aabb leaf_aabb(const Gaussian& g, float sigma_extent = kDefaultSigmaExtent) {
    Mat3f r = g.rotation.toRotationMatrix();
    Vec3f h;
    for (int k = 0; k < 3; ++k) {
        float var = 0.0f;
        for (int j = 0; j < 3; ++j) var += r(k, j) * r(k, j) * g.scale[j] * g.scale[j];
        h[k] = sigma_extent * std::sqrt(var);
    }
    return Aabb{g.mean - h, g.mean + h};
}

namespace detail {

struct SplitRange {
    std::uint32_t node;
    std::uint32_t begin, end;  // into the leaf order array
};

// Median split on the longest axis of the group's AABB. Entries exactly at
// the median go to the upper side; if that empties the lower side (equal
// projections), fall back to an index split at n/2. Original relative order
// is preserved so builds are deterministic.
inline std::uint32_t partition_group(std::span<std::uint32_t> order, std::span<const Vec3f> means,
                                     const Aabb& bounds) {
    const std::size_t n = order.size();
    int axis = 0;
    bounds.extent().maxCoeff(&axis);

    std::vector<float> proj(n);
    for (std::size_t i = 0; i < n; ++i) proj[i] = means[order[i]][axis];
    std::vector<float> sorted = proj;
    std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
    float median = sorted[n / 2];

    std::vector<std::uint32_t> lower, upper;
    lower.reserve(n);
    upper.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        (proj[i] < median ? lower : upper).push_back(order[i]);

    if (lower.empty() || upper.empty()) return static_cast<std::uint32_t>(n / 2);

    std::copy(lower.begin(), lower.end(), order.begin());
    std::copy(upper.begin(), upper.end(), order.begin() + lower.size());
    return static_cast<std::uint32_t>(lower.size());
}

}  // namespace detail

// Binary BVH over the leaves (top-down median splits), then bottom-up
// moment-matched merges for interior Gaussians and a root-down pass aligning
// every child's axis convention with its parent. 2N-1 nodes, children
// contiguous, parent index < child index.
inline Hierarchy build_bvh(std::span<const Gaussian> leaves, const BuildConfig& cfg = {}) {
    require(!leaves.empty(), Errc::EmptyScene, "build_bvh needs at least one gaussian");
    for (const auto& g : leaves) {
        validate_gaussian(g);
        require(g.falloff > 0.0f && g.falloff <= 1.0f, Errc::InvalidArgument,
                "leaf falloff must be in (0, 1]");
    }

    const std::size_t n = leaves.size();
    std::vector<Aabb> boxes(n);
    std::vector<Vec3f> means(n);
    for (std::size_t i = 0; i < n; ++i) {
        boxes[i] = leaf_aabb(leaves[i], cfg.sigma_extent);
        means[i] = leaves[i].mean;
    }

    Hierarchy h;
    h.nodes.resize(2 * n - 1);
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    // Group bounds for splitting are unions of leaf boxes; computed on the fly.
    auto group_bounds = [&](std::uint32_t b, std::uint32_t e) {
        Aabb a;
        for (std::uint32_t i = b; i < e; ++i) a.expand(boxes[order[i]]);
        return a;
    };

    std::vector<detail::SplitRange> stack{{0, 0, static_cast<std::uint32_t>(n)}};
    std::uint32_t next_free = 1;
    while (!stack.empty()) {
        auto [node, begin, end] = stack.back();
        stack.pop_back();
        if (end - begin == 1) {
            HierarchyNode& leaf = h.nodes[node];
            leaf.g = leaves[order[begin]];
            leaf.bounds = boxes[order[begin]];
            continue;
        }
        Aabb gb = group_bounds(begin, end);
        std::uint32_t split = detail::partition_group(
            std::span<std::uint32_t>(order.data() + begin, end - begin), means, gb);
        std::uint32_t first_child = next_free;
        next_free += 2;
        h.nodes[node].first_child = first_child;
        h.nodes[node].child_count = 2;
        h.nodes[first_child].parent = node;
        h.nodes[first_child + 1].parent = node;
        stack.push_back({first_child + 1, begin + split, end});
        stack.push_back({first_child, begin, begin + split});
    }

    // Bottom-up: children always have larger indices than their parent.
    for (std::size_t i = h.nodes.size(); i-- > 0;) {
        HierarchyNode& node = h.nodes[i];
        if (node.is_leaf()) continue;
        std::vector<Gaussian> kids(node.child_count);
        Aabb bounds;
        for (std::uint32_t c = 0; c < node.child_count; ++c) {
            kids[c] = h.nodes[node.first_child + c].g;
            bounds.expand(h.nodes[node.first_child + c].bounds);
        }
        node.g = merge_gaussians(kids);
        node.bounds = bounds;
    }

    // Root-down: parents are re-oriented before their children are visited.
    for (std::size_t i = 0; i < h.nodes.size(); ++i) {
        const HierarchyNode& node = h.nodes[i];
        if (node.is_leaf()) continue;
        for (std::uint32_t c = 0; c < node.child_count; ++c) {
            HierarchyNode& child = h.nodes[node.first_child + c];
            child.g = match_orientation(child.g, node.g.rotation);
        }
    }
    return h;
}

namespace detail {

// Nearest alive ancestor for every alive node (root stays kNoNode).
inline std::vector<std::uint32_t> alive_parents(const Hierarchy& h,
                                                const std::vector<unsigned char>& alive) {
    std::vector<std::uint32_t> ap(h.nodes.size(), kNoNode);
    for (std::size_t i = 1; i < h.nodes.size(); ++i) {
        if (!alive[i]) continue;
        std::uint32_t p = h.nodes[i].parent;
        while (p != kNoNode && !alive[p]) p = h.nodes[p].parent;
        ap[i] = p;
    }
    return ap;
}

}  // namespace detail

// Remove interior nodes no cut at the probed granularity ladder ever uses.
// For each tau in {tau_min, 2 tau_min, ...} <= tau_max: union the per-camera
// cuts, mark every union node as needed, and delete unmarked nodes strictly
// between the union's bottom-most nodes and previously marked descendants,
// hoisting children to the nearest surviving ancestor. Leaves are always
// kept. The result is a K-children tree rendering the same leaf coverage at
// every probed tau.
inline Hierarchy compact(const Hierarchy& h, std::span<const CameraModel> cams,
                         float tau_min = 3.0f, float tau_max = 0.0f) {
    require(!h.empty(), Errc::InvalidArgument, "compact needs a hierarchy");
    require(!cams.empty(), Errc::InvalidArgument, "compact needs at least one camera");
    require(tau_min > 0.0f, Errc::InvalidArgument, "tau_min must be positive");
    if (h.nodes.size() == 1) return h;

    if (tau_max <= 0.0f) {
        for (const auto& c : cams)
            tau_max = std::max(tau_max, 0.5f * static_cast<float>(std::max(c.width, c.height)));
    }

    const std::size_t n = h.nodes.size();
    std::vector<unsigned char> alive(n, 1), marked(n, 0);
    for (std::size_t i = 0; i < n; ++i) marked[i] = h.nodes[i].is_leaf();

    for (float tau = tau_min; tau <= tau_max; tau *= 2.0f) {
        auto ap = detail::alive_parents(h, alive);

        // Union of per-camera cuts on the current (alive) tree.
        std::vector<unsigned char> in_union(n, 0);
        for (const auto& cam : cams) {
            for (std::size_t i = 0; i < n; ++i) {
                if (!alive[i] || in_union[i]) continue;
                float eps = granularity(h.nodes[i].bounds, cam);
                bool fine_enough = eps <= tau;
                if (!fine_enough && !h.nodes[i].is_leaf()) continue;
                if (ap[i] != kNoNode && !(granularity(h.nodes[ap[i]].bounds, cam) > tau)) continue;
                in_union[i] = 1;
            }
        }

        // Every union member is needed by some camera at this granularity;
        // keep them all so later (coarser) rounds cannot delete them. Nothing
        // in the union sits strictly inside a bottom-most member, so this
        // does not shrink the deletion band below.
        for (std::size_t i = 0; i < n; ++i)
            if (in_union[i]) marked[i] = 1;

        // Bottom-most members: drop union nodes with a union descendant.
        std::vector<unsigned char> has_union_below(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!in_union[i]) continue;
            for (std::uint32_t p = ap[i]; p != kNoNode; p = ap[p]) {
                if (has_union_below[p]) break;
                has_union_below[p] = 1;
            }
        }

        // Current children lists for the kill walk.
        std::vector<std::vector<std::uint32_t>> kids(n);
        for (std::size_t i = 1; i < n; ++i)
            if (alive[i] && ap[i] != kNoNode) kids[ap[i]].push_back(static_cast<std::uint32_t>(i));

        for (std::size_t b = 0; b < n; ++b) {
            if (!in_union[b] || has_union_below[b]) continue;
            // Unmarked nodes between b and its first marked descendants die.
            std::vector<std::uint32_t> walk(kids[b]);
            while (!walk.empty()) {
                std::uint32_t c = walk.back();
                walk.pop_back();
                if (marked[c]) continue;
                alive[c] = 0;
                for (std::uint32_t gc : kids[c]) walk.push_back(gc);
            }
        }
    }

    // Materialize the surviving tree, children contiguous, BFS order.
    auto ap = detail::alive_parents(h, alive);
    std::vector<std::vector<std::uint32_t>> kids(n);
    for (std::size_t i = 1; i < n; ++i)
        if (alive[i] && ap[i] != kNoNode) kids[ap[i]].push_back(static_cast<std::uint32_t>(i));

    Hierarchy out;
    out.sh_degree = h.sh_degree;
    std::vector<std::uint32_t> new_index(n, kNoNode);
    std::vector<std::uint32_t> bfs{0};
    new_index[0] = 0;
    out.nodes.push_back(h.nodes[0]);
    out.nodes[0].parent = kNoNode;
    for (std::size_t head = 0; head < bfs.size(); ++head) {
        std::uint32_t old = bfs[head];
        std::uint32_t me = new_index[old];
        out.nodes[me].first_child = kids[old].empty() ? kNoNode
                                                      : static_cast<std::uint32_t>(out.nodes.size());
        out.nodes[me].child_count = static_cast<std::uint32_t>(kids[old].size());
        for (std::uint32_t c : kids[old]) {
            new_index[c] = static_cast<std::uint32_t>(out.nodes.size());
            out.nodes.push_back(h.nodes[c]);
            out.nodes.back().parent = me;
            out.nodes.back().first_child = kNoNode;
            out.nodes.back().child_count = 0;
            bfs.push_back(c);
        }
    }
    return out;
}

}  // namespace hsplat
