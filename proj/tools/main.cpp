// Command-line front end: file plumbing around the library. Subcommands
// compose into a full pipeline:
//   chunk -> build (per chunk) -> refine -> compact -> consolidate -> render/bench
#include <CLI11.hpp>

#include <hsplat/bench.hpp>
#include <hsplat/build.hpp>
#include <hsplat/io.hpp>
#include <hsplat/refine.hpp>
#include <hsplat/scene.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

using namespace hsplat;

namespace {

std::string indexed(const std::string& prefix, std::size_t i, const char* ext) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04zu", i);
    return prefix + buf + ext;
}

void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::size_t find_chunk(const SceneManifest& m, int ix, int iz) {
    for (std::size_t i = 0; i < m.chunks.size(); ++i)
        if (m.chunks[i].grid_coord.x() == ix && m.chunks[i].grid_coord.y() == iz) return i;
    fail(Errc::InvalidArgument,
         "manifest has no chunk (" + std::to_string(ix) + ", " + std::to_string(iz) + ")");
}

void print_tree_summary(const char* label, const Hierarchy& h) {
    std::printf("%s: %zu nodes, %zu leaves\n", label, h.nodes.size(), h.leaf_count());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical gaussian splatting toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    float tau = 0.0f;
    std::uint64_t seed = 0;
    int threads = 0;
    std::string config_path;
    app.add_option("--tau", tau, "granularity target in pixels (0 = full detail)");
    auto* seed_opt = app.add_option("--seed", seed, "seed for randomized steps");
    app.add_option("--threads", threads, "worker thread cap (0 = hardware)");
    app.add_option("--config", config_path, "JSON config for build/refine parameters");

    // build: splat file -> hierarchy, optionally windowed to one manifest chunk.
    std::string in_path, out_path, manifest_path, scaffold_path, image_dir, cams_path;
    int chunk_ix = 0, chunk_iz = 0;
    auto* cmd_build = app.add_subcommand("build", "build a hierarchy over a splat file");
    cmd_build->add_option("splats", in_path, "input splat file (.ply)")->required();
    cmd_build->add_option("output", out_path, "output hierarchy (.h3dg)")->required();
    auto* build_manifest =
        cmd_build->add_option("--manifest", manifest_path, "scene manifest to build one chunk of");
    auto* build_ix = cmd_build->add_option("--chunk-ix", chunk_ix, "chunk grid x")->needs(build_manifest);
    auto* build_iz = cmd_build->add_option("--chunk-iz", chunk_iz, "chunk grid z")->needs(build_manifest);
    build_manifest->needs(build_ix)->needs(build_iz);
    cmd_build->add_option("--scaffold", scaffold_path,
                          "coarse scene splats used as the out-of-chunk backdrop");

    // compact: drop interior nodes unused by any cut on a granularity ladder.
    float tau_min = 3.0f, tau_max = 0.0f;
    auto* cmd_compact = app.add_subcommand("compact", "remove interior nodes no cut uses");
    cmd_compact->add_option("hierarchy", in_path, "input hierarchy")->required();
    cmd_compact->add_option("cameras", cams_path, "training cameras (text)")->required();
    cmd_compact->add_option("output", out_path, "output hierarchy")->required();
    cmd_compact->add_option("--tau-min", tau_min, "finest probed granularity (px)");
    cmd_compact->add_option("--tau-max", tau_max, "coarsest probed granularity (0 = auto)");

    // refine: optimize interior node attributes against training views.
    auto* cmd_refine = app.add_subcommand("refine", "optimize interior nodes on training views");
    cmd_refine->add_option("hierarchy", in_path, "input hierarchy")->required();
    cmd_refine->add_option("cameras", cams_path, "training cameras (text)")->required();
    cmd_refine->add_option("images", image_dir, "directory with view_0000.png per camera")
        ->required();
    cmd_refine->add_option("output", out_path, "output hierarchy")->required();

    // chunk: cameras + structure-from-motion points -> scene manifest.
    float chunk_size = 50.0f;
    auto* cmd_chunk = app.add_subcommand("chunk", "lay a chunk grid over the captured scene");
    cmd_chunk->add_option("cameras", cams_path, "cameras (text)")->required();
    cmd_chunk->add_option("points", in_path, "sparse points (text)")->required();
    cmd_chunk->add_option("output", out_path, "output manifest")->required();
    cmd_chunk->add_option("--size", chunk_size, "chunk side length in scene units");

    // consolidate: merge per-chunk hierarchies into one tree with a sky shell.
    std::size_t skybox_count = 100000;
    bool no_skybox = false;
    auto* cmd_consolidate =
        app.add_subcommand("consolidate", "merge built chunks into a single hierarchy");
    cmd_consolidate->add_option("manifest", manifest_path, "scene manifest")->required();
    cmd_consolidate->add_option("output", out_path, "output hierarchy")->required();
    cmd_consolidate->add_option("--skybox-count", skybox_count, "gaussians on the sky sphere");
    cmd_consolidate->add_flag("--no-skybox", no_skybox, "skip the sky shell");

    // render: hierarchy + cameras -> color PNG and inverse-depth dump per view.
    auto* cmd_render = app.add_subcommand("render", "render each camera to PNG and depth");
    cmd_render->add_option("hierarchy", in_path, "input hierarchy")->required();
    cmd_render->add_option("cameras", cams_path, "cameras (text)")->required();
    cmd_render->add_option("prefix", out_path, "output prefix (files <prefix>NNNN.png/.f32)")
        ->required();

    // bench: replay a camera path, time the stages, report the workload CSV.
    auto* cmd_bench = app.add_subcommand("bench", "replay a camera path and report workload");
    cmd_bench->add_option("hierarchy", in_path, "input hierarchy")->required();
    cmd_bench->add_option("path", cams_path, "camera path (text with timestamps)")->required();
    cmd_bench->add_option("output", out_path, "output CSV")->required();

    auto* cmd_inspect = app.add_subcommand("inspect", "print hierarchy statistics");
    cmd_inspect->add_option("hierarchy", in_path, "input hierarchy")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) set_thread_count(threads);
        ToolConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);

        if (cmd_build->parsed()) {
            const SplatFile splats = read_splats(in_path);
            Hierarchy h;
            if (!manifest_path.empty()) {
                SceneManifest m = read_manifest(manifest_path);
                const std::size_t ci = find_chunk(m, chunk_ix, chunk_iz);
                std::vector<Gaussian> own;
                for (const Gaussian& g : splats.gaussians)
                    if (ground_distance(g.mean, m.chunks[ci].bounds) == 0.0f) own.push_back(g);
                std::vector<Gaussian> scaffold;
                const std::string sc =
                    !scaffold_path.empty() ? scaffold_path : m.scaffold_file;
                if (!sc.empty()) scaffold = read_splats(sc).gaussians;
                h = assemble_chunk(m.chunks[ci], own, scaffold, cfg.build);
                // Record the built chunk (and the scaffold) back into the manifest.
                m.chunk_files[ci] = out_path;
                if (!scaffold_path.empty()) m.scaffold_file = scaffold_path;
                write_manifest(manifest_path, m);
            } else {
                h = build_bvh(splats.gaussians, cfg.build);
            }
            ensure_parent_dir(out_path);
            write_hierarchy(out_path, h);
            print_tree_summary("built", h);
        } else if (cmd_compact->parsed()) {
            const Hierarchy h = read_hierarchy(in_path);
            const auto cams = read_cameras(cams_path);
            const Hierarchy c = compact(h, cams, tau_min, tau_max);
            ensure_parent_dir(out_path);
            write_hierarchy(out_path, c);
            std::printf("compacted: %zu -> %zu nodes (%zu leaves)\n", h.nodes.size(),
                        c.nodes.size(), c.leaf_count());
        } else if (cmd_refine->parsed()) {
            const Hierarchy h = read_hierarchy(in_path);
            const auto cams = read_cameras(cams_path);
            std::vector<Imagef> images;
            for (std::size_t i = 0; i < cams.size(); ++i)
                images.push_back(read_png(
                    (std::filesystem::path(image_dir) / indexed("view_", i, ".png")).string()));
            RefineConfig rc = cfg.refine;
            if (*seed_opt) rc.rng_seed = seed;
            RefineStats stats;
            const Hierarchy r = refine_hierarchy(h, cams, images, rc, &stats);
            ensure_parent_dir(out_path);
            write_hierarchy(out_path, r);
            std::printf("refined: %d steps, loss %.6f -> %.6f\n", rc.steps,
                        stats.loss.empty() ? 0.0 : stats.loss.front(),
                        stats.loss.empty() ? 0.0 : stats.loss.back());
        } else if (cmd_chunk->parsed()) {
            const auto cams = read_cameras(cams_path);
            const SfmPointSet sfm = read_sfm(in_path);
            SceneManifest m;
            m.chunk_size = chunk_size;
            m.chunks = make_grid(sfm, cams, chunk_size);
            m.chunk_files.assign(m.chunks.size(), "");
            ensure_parent_dir(out_path);
            write_manifest(out_path, m);
            std::printf("chunked: %zu chunks of side %g\n", m.chunks.size(), chunk_size);
        } else if (cmd_consolidate->parsed()) {
            const SceneManifest m = read_manifest(manifest_path);
            std::vector<Hierarchy> trees;
            for (std::size_t i = 0; i < m.chunks.size(); ++i) {
                require(!m.chunk_files[i].empty(), Errc::InvalidArgument,
                        "manifest chunk " + std::to_string(i) + " has no built hierarchy");
                trees.push_back(read_hierarchy(m.chunk_files[i]));
            }
            std::vector<Gaussian> scaffold;
            if (!m.scaffold_file.empty()) scaffold = read_splats(m.scaffold_file).gaussians;
            std::vector<Gaussian> sky;
            if (!m.skybox_file.empty()) {
                sky = read_splats(m.skybox_file).gaussians;
            } else if (!no_skybox) {
                Aabb all;
                for (const Hierarchy& t : trees) all = aabb_union(all, t.nodes[0].bounds);
                sky = make_skybox(all.extent().norm(), skybox_count, seed, all.center());
            }
            const Hierarchy merged = consolidate(m.chunks, trees, scaffold, sky);
            ensure_parent_dir(out_path);
            write_hierarchy(out_path, merged);
            print_tree_summary("consolidated", merged);
        } else if (cmd_render->parsed()) {
            const Hierarchy h = read_hierarchy(in_path);
            const auto cams = read_cameras(cams_path);
            ensure_parent_dir(out_path);
            for (std::size_t i = 0; i < cams.size(); ++i) {
                const RenderOutput out = render_hierarchy(h, cams[i], tau);
                write_png(indexed(out_path, i, ".png"), out.color);
                write_depth(indexed(out_path, i, ".f32"), out.depth);
            }
            std::printf("rendered %zu views at tau %g\n", cams.size(), tau);
        } else if (cmd_bench->parsed()) {
            const Hierarchy h = read_hierarchy(in_path);
            const CameraPath path = read_camera_path(cams_path);
            const BenchReport rep = bench_path(h, path, tau);
            ensure_parent_dir(out_path);
            detail::write_file(out_path, rep.csv());
            std::printf("bench: %zu frames at tau %g, mean rendered %.1f (%.2f%% of %zu leaves), "
                        "transferred %zu\n",
                        rep.frames.size(), tau, rep.mean_rendered, rep.mean_rendered_pct,
                        rep.leaf_count, rep.total_transferred);
        } else if (cmd_inspect->parsed()) {
            const Hierarchy h = read_hierarchy(in_path);
            std::size_t max_depth = 0, interior = 0;
            float min_falloff = kInf, max_falloff = -kInf;
            std::vector<std::size_t> depth(h.nodes.size(), 0);
            for (std::size_t i = 0; i < h.nodes.size(); ++i) {
                if (h.nodes[i].parent != kNoNode) depth[i] = depth[h.nodes[i].parent] + 1;
                max_depth = std::max(max_depth, depth[i]);
                interior += !h.nodes[i].is_leaf();
                min_falloff = std::min(min_falloff, h.nodes[i].g.falloff);
                max_falloff = std::max(max_falloff, h.nodes[i].g.falloff);
            }
            const Aabb& b = h.nodes[0].bounds;
            std::printf("nodes %zu\nleaves %zu\ninterior %zu\nmax_depth %zu\nsh_degree %d\n",
                        h.nodes.size(), h.leaf_count(), interior, max_depth, h.sh_degree);
            std::printf("bounds %g %g %g  %g %g %g\n", b.min.x(), b.min.y(), b.min.z(),
                        b.max.x(), b.max.y(), b.max.z());
            std::printf("falloff %g .. %g\n", min_falloff, max_falloff);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "hsplat: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "hsplat: %s\n", e.what());
        return 1;
    }
    return 0;
}
