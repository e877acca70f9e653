#pragma once

#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "image.hpp"
#include "io.hpp"
#include "render.hpp"

// Camera-path replay harness: renders every frame through the level-of-detail
// cut, recomputing the cut every second frame, and accounts for the workload
// (splats drawn, cut churn as a transfer proxy, wall time per pipeline stage).
namespace hsplat {

struct FrameStats {
    std::size_t rendered = 0;   // splats submitted this frame (cut size)
    double rendered_pct = 0.0;  // rendered as % of the hierarchy's leaf count
    std::size_t transferred = 0;  // cut entries not present in the previous cut
    StageTimes stages;
};

struct BenchReport {
    std::size_t leaf_count = 0;
    float tau = 0.0f;
    std::vector<FrameStats> frames;
    double mean_rendered = 0.0;
    double mean_rendered_pct = 0.0;
    std::size_t total_transferred = 0;
    StageTimes total_stages;

    std::string csv() const {
        std::ostringstream os;
        os << "frame,rendered,rendered_pct,transferred,cut_expand_s,weights_s,"
              "preprocess_s,duplicate_s,tile_ranges_s,alpha_blend_s\n";
        const auto row = [&os](const std::string& label, double rendered, double pct,
                               std::size_t transferred, const StageTimes& t) {
            os << label << ',' << rendered << ',' << pct << ',' << transferred << ','
               << t.cut_expand << ',' << t.weights << ',' << t.preprocess << ','
               << t.duplicate << ',' << t.tile_ranges << ',' << t.alpha_blend << '\n';
        };
        for (std::size_t i = 0; i < frames.size(); ++i)
            row(std::to_string(i), static_cast<double>(frames[i].rendered),
                frames[i].rendered_pct, frames[i].transferred, frames[i].stages);
        row("total", mean_rendered, mean_rendered_pct, total_transferred, total_stages);
        return os.str();
    }
};

// Replay the path at one granularity target. The cut is refreshed on every
// even frame and reused on the next, so odd frames cost no cut work and move
// nothing; the transfer column counts newly appearing cut nodes, with frame 0
// paying for the full initial upload.
inline BenchReport bench_path(const Hierarchy& h, const CameraPath& path, float tau) {
    require(!path.cameras.empty(), Errc::InvalidArgument, "camera path is empty");
    require(path.timestamps.empty() || path.timestamps.size() == path.cameras.size(),
            Errc::DimensionMismatch, "one timestamp per camera");

    BenchReport rep;
    rep.leaf_count = h.leaf_count();
    rep.tau = tau;
    rep.frames.reserve(path.cameras.size());

    std::vector<CutEntry> cut;
    std::vector<RenderSplat> splats;
    std::set<std::uint32_t> prev;
    for (std::size_t i = 0; i < path.cameras.size(); ++i) {
        FrameStats fs;
        if (i % 2 == 0) {
            {
                detail::StageTimer timer(&fs.stages.cut_expand);
                cut = select_cut(h, path.cameras[i], tau);
            }
            {
                detail::StageTimer timer(&fs.stages.weights);
                splats = cut_render_splats(h, cut);
            }
            std::set<std::uint32_t> cur;
            for (const CutEntry& e : cut) cur.insert(e.node);
            for (std::uint32_t n : cur) fs.transferred += prev.count(n) == 0;
            prev = std::move(cur);
        }
        render_forward<float>(splats, path.cameras[i], nullptr, &fs.stages);

        fs.rendered = cut.size();
        fs.rendered_pct = 100.0 * static_cast<double>(cut.size()) /
                          static_cast<double>(rep.leaf_count);
        rep.mean_rendered += static_cast<double>(fs.rendered);
        rep.mean_rendered_pct += fs.rendered_pct;
        rep.total_transferred += fs.transferred;
        rep.total_stages.cut_expand += fs.stages.cut_expand;
        rep.total_stages.weights += fs.stages.weights;
        rep.total_stages.preprocess += fs.stages.preprocess;
        rep.total_stages.duplicate += fs.stages.duplicate;
        rep.total_stages.tile_ranges += fs.stages.tile_ranges;
        rep.total_stages.alpha_blend += fs.stages.alpha_blend;
        rep.frames.push_back(fs);
    }
    rep.mean_rendered /= static_cast<double>(rep.frames.size());
    rep.mean_rendered_pct /= static_cast<double>(rep.frames.size());
    return rep;
}

struct Metrics {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

inline Metrics metrics(const Image<float>& img, const Image<float>& ref) {
    return {static_cast<double>(psnr(img, ref)), static_cast<double>(ssim(img, ref))};
}

}  // namespace hsplat
