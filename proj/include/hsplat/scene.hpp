#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "build.hpp"
#include "merge.hpp"
#include "model.hpp"

// Large-scene plumbing: square ground-plane chunk grid, camera/SfM point
// assignment, skybox shell, per-chunk assembly with scaffold backdrop, and
// consolidation of independent chunk hierarchies into one global tree.
namespace hsplat {

// Chunks partition the ground plane (x,z); the vertical axis stays whole.
inline constexpr float kUnboundedExtent = 1e30f;

struct ChunkSpec {
    Eigen::Vector2i grid_coord = Eigen::Vector2i::Zero();
    Aabb bounds;
    std::vector<int> camera_ids;
    std::vector<std::uint32_t> sfm_point_ids;
};

struct SceneManifest {
    float chunk_size = 50.0f;
    std::vector<ChunkSpec> chunks;
    std::vector<std::string> chunk_files;  // parallel to chunks
    std::string scaffold_file;
    std::string skybox_file;
};

// Ground-plane distance from a point to a chunk's footprint; 0 inside.
inline float ground_distance(const Vec3f& p, const Aabb& bounds) {
    const float dx = std::max({bounds.min.x() - p.x(), 0.0f, p.x() - bounds.max.x()});
    const float dz = std::max({bounds.min.z() - p.z(), 0.0f, p.z() - bounds.max.z()});
    return std::hypot(dx, dz);
}

// A camera serves a chunk when it stands inside the chunk, or within the
// chunk's bounds scaled 2x about their center while observing more than 50
// SfM points that land inside the chunk.
inline std::vector<int> assign_cameras(const ChunkSpec& chunk, std::span<const CameraModel> cams,
                                       const SfmPointSet& sfm) {
    std::vector<int> out;
    const Aabb near = chunk.bounds.scaled_about_center(2.0f);
    for (int c = 0; c < static_cast<int>(cams.size()); ++c) {
        const Vec3f p = cams[c].position();
        if (ground_distance(p, chunk.bounds) == 0.0f) {
            out.push_back(c);
            continue;
        }
        if (ground_distance(p, near) > 0.0f) continue;
        const auto it = sfm.per_image.find(c);
        if (it == sfm.per_image.end()) continue;
        int inside = 0;
        for (const SfmObservation& o : it->second) {
            require(o.point < sfm.positions.size(), Errc::InvalidArgument,
                    "observation refers to a missing point");
            inside += ground_distance(sfm.positions[o.point], chunk.bounds) == 0.0f;
        }
        if (inside > 50) out.push_back(c);
    }
    return out;
}

// Square grid over the ground-plane rectangle of the camera positions,
// aligned to its min corner; cells that attract no cameras are dropped.
inline std::vector<ChunkSpec> make_grid(const SfmPointSet& sfm, std::span<const CameraModel> cams,
                                        float chunk_size) {
    require(chunk_size > 0.0f, Errc::InvalidArgument, "chunk size must be positive");
    require(!cams.empty(), Errc::EmptyScene, "chunk grid needs at least one camera");

    float min_x = kInf, min_z = kInf, max_x = -kInf, max_z = -kInf;
    for (const CameraModel& c : cams) {
        const Vec3f p = c.position();
        min_x = std::min(min_x, p.x());
        max_x = std::max(max_x, p.x());
        min_z = std::min(min_z, p.z());
        max_z = std::max(max_z, p.z());
    }
    const int nx = std::max(1, static_cast<int>(std::ceil((max_x - min_x) / chunk_size)));
    const int nz = std::max(1, static_cast<int>(std::ceil((max_z - min_z) / chunk_size)));

    std::vector<ChunkSpec> chunks;
    for (int iz = 0; iz < nz; ++iz)
        for (int ix = 0; ix < nx; ++ix) {
            ChunkSpec spec;
            spec.grid_coord = Eigen::Vector2i(ix, iz);
            spec.bounds.min = Vec3f(min_x + ix * chunk_size, -kUnboundedExtent,
                                    min_z + iz * chunk_size);
            spec.bounds.max = Vec3f(min_x + (ix + 1) * chunk_size, kUnboundedExtent,
                                    min_z + (iz + 1) * chunk_size);
            spec.camera_ids = assign_cameras(spec, cams, sfm);
            if (spec.camera_ids.empty()) continue;
            for (std::uint32_t p = 0; p < sfm.positions.size(); ++p)
                if (ground_distance(sfm.positions[p], spec.bounds) == 0.0f)
                    spec.sfm_point_ids.push_back(p);
            chunks.push_back(std::move(spec));
        }
    return chunks;
}

// Shell of mid-gray splats uniformly covering the sphere 5 scene diameters
// out, sized so neighbors roughly touch (circumference / sqrt(count)).
inline std::vector<Gaussian> make_skybox(float scene_diameter, std::size_t count = 100000,
                                         std::uint64_t rng_seed = 0,
                                         const Vec3f& centroid = Vec3f::Zero()) {
    require(scene_diameter > 0.0f, Errc::InvalidArgument, "scene diameter must be positive");
    require(count > 0, Errc::InvalidArgument, "skybox needs at least one splat");
    const float radius = 5.0f * scene_diameter;
    const float spacing =
        2.0f * std::numbers::pi_v<float> * radius / std::sqrt(static_cast<float>(count));

    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    std::vector<Gaussian> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const float z = 1.0f - 2.0f * uni(rng);
        const float phi = 2.0f * std::numbers::pi_v<float> * uni(rng);
        const float r = std::sqrt(std::max(0.0f, 1.0f - z * z));
        Gaussian g;
        g.mean = centroid + radius * Vec3f(r * std::cos(phi), z, r * std::sin(phi));
        g.scale = Vec3f::Constant(spacing);
        g.falloff = 0.7f;
        out.push_back(g);  // SH left zero: renders the mid-gray base color
    }
    return out;
}

// Scaffold splats that sit outside the chunk but within one chunk width of
// it: the backdrop ring a chunk trains against.
inline std::vector<Gaussian> backdrop_scaffold(const ChunkSpec& chunk,
                                               std::span<const Gaussian> scaffold) {
    const float ring = chunk.bounds.max.x() - chunk.bounds.min.x();
    std::vector<Gaussian> out;
    for (const Gaussian& g : scaffold) {
        const float d = ground_distance(g.mean, chunk.bounds);
        if (d > 0.0f && d <= ring) out.push_back(g);
    }
    return out;
}

// One chunk's hierarchy: own splats plus the neighboring scaffold backdrop.
// The backdrop leaves sit outside the chunk bounds, so consolidation can
// hand them back to the chunks they actually belong to.
inline Hierarchy assemble_chunk(const ChunkSpec& chunk, std::span<const Gaussian> own,
                                std::span<const Gaussian> scaffold,
                                const BuildConfig& cfg = {}) {
    std::vector<Gaussian> leaves(own.begin(), own.end());
    const auto backdrop = backdrop_scaffold(chunk, scaffold);
    leaves.insert(leaves.end(), backdrop.begin(), backdrop.end());
    require(!leaves.empty(), Errc::EmptyScene, "chunk has no splats to build from");
    return build_bvh(leaves, cfg);
}

namespace detail {

struct TempNode {
    Gaussian g;
    Aabb bounds;
    std::vector<std::uint32_t> children;
    bool remerged = false;  // interior created or rebuilt here; re-match kids
};

}  // namespace detail

// Cross-chunk cleanup plus global assembly. Leaves outside their owning
// chunk that lie strictly closer to another chunk's footprint are deleted
// (their true owner has its own copy of that content); affected ancestors
// are re-merged bottom-up and single-child interiors collapse. All chunk
// roots and the skybox then gather under one merged global root.
inline Hierarchy consolidate(std::span<const ChunkSpec> chunks,
                             std::span<const Hierarchy> hierarchies,
                             std::span<const Gaussian> scaffold,
                             std::span<const Gaussian> skybox) {
    require(chunks.size() == hierarchies.size(), Errc::DimensionMismatch,
            "need one hierarchy per chunk");
    (void)scaffold;  // backdrop leaves are recognized by position, not identity

    std::vector<detail::TempNode> temp;
    temp.reserve(1024);

    // Prune one chunk subtree; returns the temp index or kNoNode, and flags
    // whether the subtree's merged attributes changed.
    std::function<std::uint32_t(const Hierarchy&, std::size_t, std::uint32_t, bool&)> prune =
        [&](const Hierarchy& h, std::size_t chunk_idx, std::uint32_t node, bool& changed)
        -> std::uint32_t {
        const HierarchyNode& n = h.nodes[node];
        if (n.is_leaf()) {
            const float d_own = ground_distance(n.g.mean, chunks[chunk_idx].bounds);
            if (d_own > 0.0f) {
                for (std::size_t j = 0; j < chunks.size(); ++j) {
                    if (j == chunk_idx) continue;
                    if (ground_distance(n.g.mean, chunks[j].bounds) < d_own) {
                        changed = true;
                        return kNoNode;
                    }
                }
            }
            detail::TempNode t;
            t.g = n.g;
            t.bounds = n.bounds;
            temp.push_back(std::move(t));
            return static_cast<std::uint32_t>(temp.size() - 1);
        }

        std::vector<std::uint32_t> kept;
        bool kids_changed = false;
        for (std::uint32_t c = 0; c < n.child_count; ++c) {
            const std::uint32_t k = prune(h, chunk_idx, n.first_child + c, kids_changed);
            if (k != kNoNode) kept.push_back(k);
        }
        changed |= kids_changed;
        if (kept.empty()) return kNoNode;
        if (kept.size() == 1) return kept[0];  // collapse the pass-through level

        detail::TempNode t;
        if (kids_changed) {
            std::vector<Gaussian> kids;
            for (std::uint32_t k : kept) {
                kids.push_back(temp[k].g);
                t.bounds.expand(temp[k].bounds);
            }
            t.g = merge_gaussians(kids);
            t.remerged = true;
        } else {
            t.g = n.g;
            t.bounds = n.bounds;
        }
        t.children = std::move(kept);
        temp.push_back(std::move(t));
        return static_cast<std::uint32_t>(temp.size() - 1);
    };

    std::vector<std::uint32_t> forest;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        require(!hierarchies[i].empty(), Errc::InvalidArgument, "chunk hierarchy is empty");
        bool changed = false;
        const std::uint32_t r = prune(hierarchies[i], i, 0, changed);
        if (r != kNoNode) forest.push_back(r);
    }

    if (!skybox.empty()) {
        const Hierarchy sky = build_bvh(skybox);
        // Copy the skybox tree into temp space verbatim.
        std::vector<std::uint32_t> remap(sky.nodes.size());
        for (std::size_t i = sky.nodes.size(); i-- > 0;) {
            const HierarchyNode& n = sky.nodes[i];
            detail::TempNode t;
            t.g = n.g;
            t.bounds = n.bounds;
            for (std::uint32_t c = 0; c < n.child_count; ++c)
                t.children.push_back(remap[n.first_child + c]);
            temp.push_back(std::move(t));
            remap[i] = static_cast<std::uint32_t>(temp.size() - 1);
        }
        forest.push_back(remap[0]);
    }

    require(!forest.empty(), Errc::EmptyScene, "consolidation removed every splat");

    std::uint32_t root;
    if (forest.size() == 1) {
        root = forest[0];
    } else {
        detail::TempNode t;
        std::vector<Gaussian> kids;
        for (std::uint32_t k : forest) {
            kids.push_back(temp[k].g);
            t.bounds.expand(temp[k].bounds);
        }
        t.g = merge_gaussians(kids);
        t.remerged = true;
        t.children = forest;
        temp.push_back(std::move(t));
        root = static_cast<std::uint32_t>(temp.size() - 1);
    }

    // Serialize breadth-first: children contiguous, parent index < child
    // index, matching the builder's layout.
    Hierarchy out;
    out.nodes.reserve(temp.size());
    std::vector<std::uint32_t> queue{root};
    std::vector<std::uint32_t> flat_of(temp.size());
    out.nodes.emplace_back();
    flat_of[root] = 0;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
        const std::uint32_t ti = queue[qi];
        const detail::TempNode& t = temp[ti];
        const std::uint32_t fi = flat_of[ti];
        out.nodes[fi].g = t.g;
        out.nodes[fi].bounds = t.bounds;
        if (t.children.empty()) continue;
        const std::uint32_t first = static_cast<std::uint32_t>(out.nodes.size());
        out.nodes[fi].first_child = first;
        out.nodes[fi].child_count = static_cast<std::uint32_t>(t.children.size());
        for (std::size_t c = 0; c < t.children.size(); ++c) {
            out.nodes.emplace_back();
            out.nodes[first + c].parent = fi;
            flat_of[t.children[c]] = first + static_cast<std::uint32_t>(c);
            queue.push_back(t.children[c]);
        }
        // Nodes merged here get their children's axis conventions re-aligned,
        // same as the builder's root-down pass.
        if (t.remerged)
            for (std::size_t c = 0; c < t.children.size(); ++c)
                temp[t.children[c]].g =
                    match_orientation(temp[t.children[c]].g, t.g.rotation);
    }
    return out;
}

}  // namespace hsplat
