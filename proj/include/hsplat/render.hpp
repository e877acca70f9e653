#pragma once

#include <hsplat/image.hpp>
#include <hsplat/lod.hpp>
#include <hsplat/model.hpp>
#include <hsplat/parallel.hpp>
#include <hsplat/sh.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <span>
#include <vector>

// Deterministic CPU tile rasterizer for Gaussian splats. Forward pass renders
// color, blended inverse depth and residual transmittance; the backward pass
// produces analytic gradients for every splat attribute plus the camera's
// affine exposure. Results are independent of the thread count: pixels are
// owned by exactly one tile and all cross-tile reductions run in fixed order.
namespace hsplat {

// Wall-clock seconds per pipeline stage (filled when a pointer is passed in).
struct StageTimes {
    double cut_expand = 0;   // hierarchy cut selection
    double weights = 0;      // interpolation weights / splat assembly
    double preprocess = 0;   // projection, culling, color
    double duplicate = 0;    // sorting and per-tile emission
    double tile_ranges = 0;  // per-tile range bookkeeping
    double alpha_blend = 0;  // per-pixel blending
};

namespace detail {

class StageTimer {
public:
    explicit StageTimer(double* slot)
        : slot_(slot), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        if (slot_)
            *slot_ +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    double* slot_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

template <class T>
struct ProjectedSplatT {
    bool culled = true;
    Vec2<T> mean2d = Vec2<T>::Zero();
    T inv_depth = T(0);  // 1/z at the mean, the quantity blended into the depth map
    Vec3<T> cam_point = Vec3<T>::Zero();
    Mat2<T> cov2d = Mat2<T>::Zero();  // after low-pass dilation
    T det_pre = T(0);
    T det_post = T(0);
    Vec3<T> conic = Vec3<T>::Zero();  // inverse covariance packed (a, b, c)
    T alpha_scale = T(0);
    Vec3<T> color = Vec3<T>::Zero();
    std::array<bool, 3> color_clamped{};
    int radius = 0;                   // 3-sigma pixel radius
    int tx0 = 0, tx1 = 0, ty0 = 0, ty1 = 0;  // half-open tile span
    T falloff_eff = T(0);
    T parent_falloff_eff = T(0);
    bool falloff_pos = false;
    bool parent_falloff_pos = false;
    T t = T(1);
    T inv_k = T(1);
};

using ProjectedSplat = ProjectedSplatT<float>;

template <class T>
struct RenderOutputT {
    Image<T> color;          // H x W x 3, linear, before exposure
    Image<T> depth;          // H x W, sum of T_i * alpha_i * (1/z_i)
    Image<T> transmittance;  // H x W, remaining T after blending
    int rendered_count = 0;  // splats that contributed to at least one pixel
};

using RenderOutput = RenderOutputT<float>;

template <class T>
struct ForwardContextT {
    CameraModel cam;
    std::vector<RenderSplatT<T>> splats;
    std::vector<ProjectedSplatT<T>> projected;
    std::vector<std::uint32_t> order;  // visible splats, depth-sorted
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::size_t> tile_start;        // ntiles + 1 offsets
    std::vector<std::uint32_t> tile_entries;    // splat ids, sorted order per tile
    Image<T> color, depth, transmittance;       // forward results
    bool valid = false;
};

using ForwardContext = ForwardContextT<float>;

// Projection of one splat; `culled` stays set when the splat is behind the
// near plane, degenerate, or its 3-sigma footprint misses the viewport.
template <class T>
ProjectedSplatT<T> project(const RenderSplatT<T>& s, const CameraModel& cam) {
    ProjectedSplatT<T> p;
    const Mat3<T> w_rot = cam.rotation().template cast<T>();
    const Vec3<T> w_trans = cam.translation().template cast<T>();
    const Vec3<T> tc = w_rot * s.mean + w_trans;
    if (!(tc.z() > T(kNearPlane))) return p;

    const T qn = s.rotation.norm();
    if (!(qn > T(0))) return p;
    const Mat3<T> rot = quat_from_wxyz<T>(s.rotation / qn).toRotationMatrix();
    const Mat3<T> m3 = rot * s.scale.asDiagonal();
    const Mat3<T> cov_cam = w_rot * (m3 * m3.transpose()) * w_rot.transpose();

    const T fx = T(cam.focal.x()), fy = T(cam.focal.y());
    const T tz = tc.z(), tz2 = tz * tz;
    Eigen::Matrix<T, 2, 3> jac;
    jac << fx / tz, T(0), -fx * tc.x() / tz2,  //
        T(0), fy / tz, -fy * tc.y() / tz2;

    Mat2<T> pre = jac * cov_cam * jac.transpose();
    pre = (T(0.5) * (pre + pre.transpose())).eval();
    Mat2<T> post = pre;
    post(0, 0) += T(kDilation2d);
    post(1, 1) += T(kDilation2d);
    const T det_pre = pre.determinant();
    const T det_post = post.determinant();
    if (!(det_post > T(0)) || !std::isfinite(det_post)) return p;

    p.mean2d = Vec2<T>(fx * tc.x() / tz + T(cam.principal.x()),
                       fy * tc.y() / tz + T(cam.principal.y()));
    p.inv_depth = T(1) / tz;
    p.cam_point = tc;
    p.cov2d = post;
    p.det_pre = det_pre;
    p.det_post = det_post;
    p.conic = Vec3<T>(post(1, 1), -post(0, 1), post(0, 0)) / det_post;
    p.alpha_scale = std::sqrt(std::max(det_pre, T(0)) / det_post);

    const T mid = T(0.5) * (post(0, 0) + post(1, 1));
    const T lmax = mid + std::sqrt(std::max(T(0), mid * mid - det_post));
    p.radius = static_cast<int>(std::ceil(T(3) * std::sqrt(lmax)));

    const int tiles_x = (cam.width + kTileSize - 1) / kTileSize;
    const int tiles_y = (cam.height + kTileSize - 1) / kTileSize;
    const T r = static_cast<T>(p.radius);
    p.tx0 = std::clamp(static_cast<int>(std::floor((p.mean2d.x() - r) / kTileSize)), 0, tiles_x);
    p.tx1 =
        std::clamp(static_cast<int>(std::floor((p.mean2d.x() + r) / kTileSize)) + 1, 0, tiles_x);
    p.ty0 = std::clamp(static_cast<int>(std::floor((p.mean2d.y() - r) / kTileSize)), 0, tiles_y);
    p.ty1 =
        std::clamp(static_cast<int>(std::floor((p.mean2d.y() + r) / kTileSize)) + 1, 0, tiles_y);
    if (p.tx0 >= p.tx1 || p.ty0 >= p.ty1) return p;

    const Vec3<T> campos = cam.position().template cast<T>();
    const Vec3<T> dir = (s.mean - campos).normalized();
    const Vec3<T> raw = eval_sh<T>(dir, s.sh);
    for (int c = 0; c < 3; ++c) {
        p.color_clamped[c] = raw[c] < T(0);
        p.color[c] = std::max(raw[c], T(0));
    }

    p.falloff_eff = std::max(s.falloff, T(0));
    p.parent_falloff_eff = std::max(s.parent_falloff, T(0));
    p.falloff_pos = s.falloff > T(0);
    p.parent_falloff_pos = s.parent_falloff > T(0);
    p.t = s.t;
    p.inv_k = T(1) / static_cast<T>(std::max(1, s.transition_siblings));
    p.culled = false;
    return p;
}

inline ProjectedSplat project(const Gaussian& g, const CameraModel& cam) {
    return project(RenderSplat::plain(g), cam);
}

namespace detail {

// Per-pixel alpha of a projected splat, with the intermediates the backward
// pass needs. Forward, reference and backward all use exactly this.
//
// The 1/255 contribution floor is applied to each blend law separately (the
// splat's own alpha and the parent-split alpha) rather than to the blended
// result, so that at t = 0 the K siblings contribute at exactly the pixels
// where the parent would, making the handoff identity hold at the fringe too.
template <class T>
struct PixelAlpha {
    bool skip = true;
    T alpha = T(0);
    T g = T(0);
    T a_self = T(0);    // own-law alpha after the floor (0 when gated out)
    T a_parent = T(0);  // parent-law alpha before the split transform
    T split = T(0);     // parent-law contribution after floor and split
    bool self_live = false, parent_live = false;
    bool self_clamped = false, parent_clamped = false;
};

template <class T>
PixelAlpha<T> splat_alpha(const ProjectedSplatT<T>& p, T px, T py) {
    PixelAlpha<T> r;
    const T dx = px - p.mean2d.x();
    const T dy = py - p.mean2d.y();
    const T power =
        T(-0.5) * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
    if (!(power <= T(0))) return r;
    r.g = std::exp(power);

    const T self_raw = p.falloff_eff * p.alpha_scale * r.g;
    r.self_clamped = self_raw > T(kAlphaMax);
    const T self = r.self_clamped ? T(kAlphaMax) : self_raw;
    r.self_live = self >= T(kAlphaMin);
    r.a_self = r.self_live ? self : T(0);
    if (p.t < T(1)) {
        const T par_raw = p.parent_falloff_eff * p.alpha_scale * r.g;
        r.parent_clamped = par_raw > T(kAlphaMax);
        const T par = r.parent_clamped ? T(kAlphaMax) : par_raw;
        r.parent_live = par >= T(kAlphaMin);
        if (r.parent_live) {
            r.a_parent = par;
            r.split = T(1) - std::pow(T(1) - par, p.inv_k);
        }
        r.alpha = p.t * r.a_self + (T(1) - p.t) * r.split;
    } else {
        r.alpha = r.a_self;
    }
    r.skip = !(r.alpha > T(0));
    return r;
}

template <class T>
int tile_index(int tiles_x, int px, int py) {
    return (py / kTileSize) * tiles_x + px / kTileSize;
}

}  // namespace detail

// Tiled forward render. Splats are projected, depth-sorted (ties keep input
// order), bucketed into 16x16 tiles and alpha-blended front to back with
// early termination. Optionally retains the state needed for the backward
// pass and per-stage timings.
template <class T>
RenderOutputT<T> render_forward(std::span<const RenderSplatT<T>> splats, const CameraModel& cam,
                                ForwardContextT<T>* ctx_out = nullptr,
                                StageTimes* stages = nullptr) {
    validate_camera(cam);
    const int w = cam.width, h = cam.height;
    const int tiles_x = (w + kTileSize - 1) / kTileSize;
    const int tiles_y = (h + kTileSize - 1) / kTileSize;
    const std::size_t n = splats.size();

    std::vector<ProjectedSplatT<T>> projected(n);
    {
        detail::StageTimer timer(stages ? &stages->preprocess : nullptr);
        parallel_for(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) projected[i] = project(splats[i], cam);
        });
    }

    std::vector<std::uint32_t> order;
    std::vector<std::size_t> tile_start(static_cast<std::size_t>(tiles_x) * tiles_y + 1, 0);
    std::vector<std::uint32_t> tile_entries;
    {
        detail::StageTimer timer(stages ? &stages->duplicate : nullptr);
        order.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i)
            if (!projected[i].culled) order.push_back(i);
        std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
            return projected[a].cam_point.z() < projected[b].cam_point.z();
        });
        for (std::uint32_t id : order) {
            const auto& p = projected[id];
            for (int ty = p.ty0; ty < p.ty1; ++ty)
                for (int tx = p.tx0; tx < p.tx1; ++tx) tile_start[ty * tiles_x + tx + 1]++;
        }
    }
    {
        detail::StageTimer timer(stages ? &stages->tile_ranges : nullptr);
        for (std::size_t tidx = 1; tidx < tile_start.size(); ++tidx)
            tile_start[tidx] += tile_start[tidx - 1];
        tile_entries.resize(tile_start.back());
    }
    {
        detail::StageTimer timer(stages ? &stages->duplicate : nullptr);
        std::vector<std::size_t> cursor(tile_start.begin(), tile_start.end() - 1);
        for (std::uint32_t id : order) {
            const auto& p = projected[id];
            for (int ty = p.ty0; ty < p.ty1; ++ty)
                for (int tx = p.tx0; tx < p.tx1; ++tx)
                    tile_entries[cursor[ty * tiles_x + tx]++] = id;
        }
    }

    RenderOutputT<T> out;
    out.color = Image<T>(w, h, 3);
    out.depth = Image<T>(w, h, 1);
    out.transmittance = Image<T>(w, h, 1, T(1));
    std::vector<unsigned char> touched(n, 0);
    {
        detail::StageTimer timer(stages ? &stages->alpha_blend : nullptr);
        const std::size_t n_tiles = static_cast<std::size_t>(tiles_x) * tiles_y;
        parallel_for(n_tiles, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t tile = lo; tile < hi; ++tile) {
                const int bx = static_cast<int>(tile % tiles_x) * kTileSize;
                const int by = static_cast<int>(tile / tiles_x) * kTileSize;
                const std::size_t begin = tile_start[tile], end = tile_start[tile + 1];
                for (int y = by; y < std::min(by + kTileSize, h); ++y) {
                    for (int x = bx; x < std::min(bx + kTileSize, w); ++x) {
                        const T px = static_cast<T>(x) + T(0.5);
                        const T py = static_cast<T>(y) + T(0.5);
                        T trans = T(1);
                        Vec3<T> c = Vec3<T>::Zero();
                        T d = T(0);
                        for (std::size_t e = begin; e < end; ++e) {
                            const std::uint32_t id = tile_entries[e];
                            const auto& p = projected[id];
                            auto a = detail::splat_alpha(p, px, py);
                            if (a.skip) continue;
                            const T test = trans * (T(1) - a.alpha);
                            if (test < T(kTransmittanceEps)) break;
                            c += p.color * (a.alpha * trans);
                            d += p.inv_depth * a.alpha * trans;
                            trans = test;
                            std::atomic_ref<unsigned char>(touched[id])
                                .store(1, std::memory_order_relaxed);
                        }
                        for (int ch = 0; ch < 3; ++ch) out.color.at(x, y, ch) = c[ch];
                        out.depth.at(x, y, 0) = d;
                        out.transmittance.at(x, y, 0) = trans;
                    }
                }
            }
        });
    }
    for (unsigned char f : touched) out.rendered_count += f;

    if (ctx_out) {
        ctx_out->cam = cam;
        ctx_out->splats.assign(splats.begin(), splats.end());
        ctx_out->projected = std::move(projected);
        ctx_out->order = std::move(order);
        ctx_out->tiles_x = tiles_x;
        ctx_out->tiles_y = tiles_y;
        ctx_out->tile_start = std::move(tile_start);
        ctx_out->tile_entries = std::move(tile_entries);
        ctx_out->color = out.color;
        ctx_out->depth = out.depth;
        ctx_out->transmittance = out.transmittance;
        ctx_out->valid = true;
    }
    return out;
}

// Reference renderer: same projection and per-pixel math, but a plain loop
// over every depth-sorted splat for every pixel (the tile-footprint predicate
// is applied per pixel instead of via bucket lists). Exists to pin down the
// tiled renderer bit for bit.
template <class T>
RenderOutputT<T> render_reference(std::span<const RenderSplatT<T>> splats,
                                  const CameraModel& cam) {
    validate_camera(cam);
    const int w = cam.width, h = cam.height;
    const std::size_t n = splats.size();
    std::vector<ProjectedSplatT<T>> projected(n);
    for (std::size_t i = 0; i < n; ++i) projected[i] = project(splats[i], cam);

    std::vector<std::uint32_t> order;
    for (std::uint32_t i = 0; i < n; ++i)
        if (!projected[i].culled) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        return projected[a].cam_point.z() < projected[b].cam_point.z();
    });

    RenderOutputT<T> out;
    out.color = Image<T>(w, h, 3);
    out.depth = Image<T>(w, h, 1);
    out.transmittance = Image<T>(w, h, 1, T(1));
    std::vector<unsigned char> touched(n, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int tx = x / kTileSize, ty = y / kTileSize;
            const T px = static_cast<T>(x) + T(0.5);
            const T py = static_cast<T>(y) + T(0.5);
            T trans = T(1);
            Vec3<T> c = Vec3<T>::Zero();
            T d = T(0);
            for (std::uint32_t id : order) {
                const auto& p = projected[id];
                if (tx < p.tx0 || tx >= p.tx1 || ty < p.ty0 || ty >= p.ty1) continue;
                auto a = detail::splat_alpha(p, px, py);
                if (a.skip) continue;
                const T test = trans * (T(1) - a.alpha);
                if (test < T(kTransmittanceEps)) break;
                c += p.color * (a.alpha * trans);
                d += p.inv_depth * a.alpha * trans;
                trans = test;
                touched[id] = 1;
            }
            for (int ch = 0; ch < 3; ++ch) out.color.at(x, y, ch) = c[ch];
            out.depth.at(x, y, 0) = d;
            out.transmittance.at(x, y, 0) = trans;
        }
    }
    for (unsigned char f : touched) out.rendered_count += f;
    return out;
}

// Per-pixel affine color map C' = E_lin * C + E_offset.
template <class T>
Image<T> apply_exposure(const Image<T>& color, const Mat34f& exposure) {
    require(color.channels == 3, Errc::DimensionMismatch, "exposure expects a 3-channel image");
    const Mat34<T> e = exposure.cast<T>();
    Image<T> out(color.width, color.height, 3);
    const std::size_t plane = static_cast<std::size_t>(color.width) * color.height;
    for (std::size_t i = 0; i < plane; ++i) {
        Vec3<T> c(color.data[i], color.data[plane + i], color.data[2 * plane + i]);
        Vec3<T> mapped = e.template block<3, 3>(0, 0) * c + e.col(3);
        out.data[i] = mapped[0];
        out.data[plane + i] = mapped[1];
        out.data[2 * plane + i] = mapped[2];
    }
    return out;
}

template <class T>
struct RenderGradsT {
    std::vector<Vec3<T>> mean;
    std::vector<Vec3<T>> scale;
    std::vector<Vec4<T>> rotation;  // w.r.t. the raw (possibly non-unit) wxyz vector
    std::vector<T> falloff;
    std::vector<T> parent_falloff;
    std::vector<T> t;
    std::vector<std::array<T, kShValues>> sh;
    std::vector<Vec2<T>> mean2d;  // screen-space positional gradient (densification statistic)
    Mat34<T> exposure = Mat34<T>::Zero();
};

using RenderGrads = RenderGradsT<float>;

namespace detail {

// Everything accumulated per (tile, splat) during the pixel walk; reduced
// over tiles in index order so results do not depend on scheduling.
template <class T>
struct BlendAcc {
    Vec2<T> mean2d = Vec2<T>::Zero();
    Vec3<T> conic = Vec3<T>::Zero();
    Vec3<T> color = Vec3<T>::Zero();
    T falloff = T(0), parent_falloff = T(0), t = T(0), alpha_scale = T(0), inv_depth = T(0);
};

// d(loss)/d(unit quaternion) from d(loss)/d(rotation matrix).
template <class T>
Vec4<T> quat_grad_from_rot(const Vec4<T>& q, const Mat3<T>& g) {
    const T qw = q[0], qx = q[1], qy = q[2], qz = q[3];
    Vec4<T> out;
    out[0] = T(2) * (qz * (g(1, 0) - g(0, 1)) + qy * (g(0, 2) - g(2, 0)) +
                     qx * (g(2, 1) - g(1, 2)));
    out[1] = T(2) * (qy * (g(0, 1) + g(1, 0)) + qz * (g(0, 2) + g(2, 0)) +
                     qw * (g(2, 1) - g(1, 2))) -
             T(4) * qx * (g(1, 1) + g(2, 2));
    out[2] = T(2) * (qx * (g(0, 1) + g(1, 0)) + qw * (g(0, 2) - g(2, 0)) +
                     qz * (g(1, 2) + g(2, 1))) -
             T(4) * qy * (g(0, 0) + g(2, 2));
    out[3] = T(2) * (qw * (g(1, 0) - g(0, 1)) + qx * (g(0, 2) + g(2, 0)) +
                     qy * (g(1, 2) + g(2, 1))) -
             T(4) * qz * (g(0, 0) + g(1, 1));
    return out;
}

}  // namespace detail

// Analytic gradients of loss(exposed color, depth) w.r.t. splat attributes
// and the exposure matrix. `loss_grad` is w.r.t. the post-exposure image;
// `depth_grad`, when given, is w.r.t. the blended inverse-depth map.
template <class T>
RenderGradsT<T> render_backward(const ForwardContextT<T>& ctx, const Image<T>& loss_grad,
                                const Image<T>* depth_grad = nullptr) {
    require(ctx.valid, Errc::MissingForwardState,
            "render_backward needs the context of a previous forward pass");
    const int w = ctx.cam.width, h = ctx.cam.height;
    require(loss_grad.width == w && loss_grad.height == h && loss_grad.channels == 3,
            Errc::DimensionMismatch, "loss gradient must be H x W x 3");
    if (depth_grad)
        require(depth_grad->width == w && depth_grad->height == h && depth_grad->channels == 1,
                Errc::DimensionMismatch, "depth gradient must be H x W x 1");

    const std::size_t n = ctx.splats.size();
    RenderGradsT<T> out;
    out.mean.assign(n, Vec3<T>::Zero());
    out.scale.assign(n, Vec3<T>::Zero());
    out.rotation.assign(n, Vec4<T>::Zero());
    out.falloff.assign(n, T(0));
    out.parent_falloff.assign(n, T(0));
    out.t.assign(n, T(0));
    out.sh.assign(n, std::array<T, kShValues>{});
    out.mean2d.assign(n, Vec2<T>::Zero());

    const Mat34<T> expo = ctx.cam.exposure.template cast<T>();
    const Mat3<T> expo_lin = expo.template block<3, 3>(0, 0);

    // Exposure gradient: straight per-pixel outer product, fixed pixel order.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Vec3<T> lg(loss_grad.at(x, y, 0), loss_grad.at(x, y, 1), loss_grad.at(x, y, 2));
            Vec3<T> c(ctx.color.at(x, y, 0), ctx.color.at(x, y, 1), ctx.color.at(x, y, 2));
            out.exposure.template block<3, 3>(0, 0) += lg * c.transpose();
            out.exposure.col(3) += lg;
        }

    // Per-tile pixel walk mirroring the forward blend exactly.
    const std::size_t n_tiles = static_cast<std::size_t>(ctx.tiles_x) * ctx.tiles_y;
    std::vector<std::vector<detail::BlendAcc<T>>> tile_acc(n_tiles);
    parallel_for(n_tiles, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t tile = lo; tile < hi; ++tile) {
            const std::size_t begin = ctx.tile_start[tile], end = ctx.tile_start[tile + 1];
            tile_acc[tile].assign(end - begin, detail::BlendAcc<T>());
            if (begin == end) continue;
            const int bx = static_cast<int>(tile % ctx.tiles_x) * kTileSize;
            const int by = static_cast<int>(tile / ctx.tiles_x) * kTileSize;
            for (int y = by; y < std::min(by + kTileSize, h); ++y) {
                for (int x = bx; x < std::min(bx + kTileSize, w); ++x) {
                    const T px = static_cast<T>(x) + T(0.5);
                    const T py = static_cast<T>(y) + T(0.5);
                    Vec3<T> lg(loss_grad.at(x, y, 0), loss_grad.at(x, y, 1),
                               loss_grad.at(x, y, 2));
                    const Vec3<T> pre_grad = expo_lin.transpose() * lg;
                    const T dgrad = depth_grad ? depth_grad->at(x, y, 0) : T(0);
                    const Vec3<T> c_total(ctx.color.at(x, y, 0), ctx.color.at(x, y, 1),
                                          ctx.color.at(x, y, 2));
                    const T d_total = ctx.depth.at(x, y, 0);

                    T trans = T(1);
                    Vec3<T> c_prefix = Vec3<T>::Zero();
                    T d_prefix = T(0);
                    for (std::size_t e = begin; e < end; ++e) {
                        const auto& p = ctx.projected[ctx.tile_entries[e]];
                        auto a = detail::splat_alpha(p, px, py);
                        if (a.skip) continue;
                        const T test = trans * (T(1) - a.alpha);
                        if (test < T(kTransmittanceEps)) break;

                        auto& acc = tile_acc[tile][e - begin];
                        const T aw = a.alpha * trans;
                        c_prefix += p.color * aw;
                        d_prefix += p.inv_depth * aw;
                        acc.color += pre_grad * aw;
                        acc.inv_depth += dgrad * aw;

                        // Contribution of alpha via this splat and the ones
                        // behind it (suffix trick).
                        const Vec3<T> c_suffix = c_total - c_prefix;
                        const T d_suffix = d_total - d_prefix;
                        T g_alpha =
                            pre_grad.dot(p.color * trans - c_suffix / (T(1) - a.alpha));
                        g_alpha += dgrad * (p.inv_depth * trans - d_suffix / (T(1) - a.alpha));

                        T g_g = T(0), g_ascale = T(0);
                        const T g_self = p.t < T(1) ? g_alpha * p.t : g_alpha;
                        if (p.t < T(1)) {
                            acc.t += g_alpha * (a.a_self - a.split);
                            if (a.parent_live && !a.parent_clamped) {
                                const T dsplit = p.inv_k *
                                                 std::pow(T(1) - a.a_parent, p.inv_k - T(1));
                                const T g_par = g_alpha * (T(1) - p.t) * dsplit;
                                acc.parent_falloff += g_par * p.alpha_scale * a.g;
                                g_ascale += g_par * p.parent_falloff_eff * a.g;
                                g_g += g_par * p.parent_falloff_eff * p.alpha_scale;
                            }
                        }
                        if (a.self_live && !a.self_clamped) {
                            acc.falloff += g_self * p.alpha_scale * a.g;
                            g_ascale += g_self * p.falloff_eff * a.g;
                            g_g += g_self * p.falloff_eff * p.alpha_scale;
                        }
                        acc.alpha_scale += g_ascale;

                        const T g_power = g_g * a.g;
                        const T dx = px - p.mean2d.x(), dy = py - p.mean2d.y();
                        acc.conic[0] += g_power * T(-0.5) * dx * dx;
                        acc.conic[1] += g_power * -dx * dy;
                        acc.conic[2] += g_power * T(-0.5) * dy * dy;
                        acc.mean2d.x() += g_power * (p.conic[0] * dx + p.conic[1] * dy);
                        acc.mean2d.y() += g_power * (p.conic[1] * dx + p.conic[2] * dy);

                        trans = test;
                    }
                }
            }
        }
    });

    // Ordered reduction: tile index then position, independent of threading.
    std::vector<detail::BlendAcc<T>> splat_acc(n);
    for (std::size_t tile = 0; tile < n_tiles; ++tile) {
        const std::size_t begin = ctx.tile_start[tile];
        for (std::size_t e = 0; e < tile_acc[tile].size(); ++e) {
            const auto& src = tile_acc[tile][e];
            auto& dst = splat_acc[ctx.tile_entries[begin + e]];
            dst.mean2d += src.mean2d;
            dst.conic += src.conic;
            dst.color += src.color;
            dst.falloff += src.falloff;
            dst.parent_falloff += src.parent_falloff;
            dst.t += src.t;
            dst.alpha_scale += src.alpha_scale;
            dst.inv_depth += src.inv_depth;
        }
    }

    // Chain every splat's blend-level gradients back to its 3D attributes.
    const Mat3<T> w_rot = ctx.cam.rotation().template cast<T>();
    const Vec3<T> campos = ctx.cam.position().template cast<T>();
    const T fx = T(ctx.cam.focal.x()), fy = T(ctx.cam.focal.y());
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const auto& p = ctx.projected[i];
            if (p.culled) continue;
            const auto& s = ctx.splats[i];
            const auto& acc = splat_acc[i];
            out.mean2d[i] = acc.mean2d;
            out.t[i] = acc.t;
            out.falloff[i] = p.falloff_pos ? acc.falloff : T(0);
            out.parent_falloff[i] = p.parent_falloff_pos ? acc.parent_falloff : T(0);

            // Color: zero clamped channels, then split into SH and direction.
            Vec3<T> cg = acc.color;
            for (int ch = 0; ch < 3; ++ch)
                if (p.color_clamped[ch]) cg[ch] = T(0);
            Vec3<T> to_cam = s.mean - campos;
            const T dist = to_cam.norm();
            const Vec3<T> dir = to_cam / dist;
            Vec3<T> dir_grad = Vec3<T>::Zero();
            eval_sh_backward<T>(dir, s.sh, cg, out.sh[i], dir_grad);
            Vec3<T> mean_grad = (dir_grad - dir * dir.dot(dir_grad)) / dist;

            // Conic -> 2D covariance.
            Mat2<T> gq;
            gq << acc.conic[0], acc.conic[1] / T(2), acc.conic[1] / T(2), acc.conic[2];
            Mat2<T> q;
            q << p.conic[0], p.conic[1], p.conic[1], p.conic[2];
            Mat2<T> gm = -q * gq * q;

            // Opacity compensation factor sqrt(det_pre / det_post).
            if (acc.alpha_scale != T(0) && p.det_pre > T(0)) {
                const T g_dpre = acc.alpha_scale * p.alpha_scale / (T(2) * p.det_pre);
                const T g_dpost = -acc.alpha_scale * p.alpha_scale / (T(2) * p.det_post);
                Mat2<T> mpre = p.cov2d;
                mpre(0, 0) -= T(kDilation2d);
                mpre(1, 1) -= T(kDilation2d);
                gm(0, 0) += g_dpre * mpre(1, 1) + g_dpost * p.cov2d(1, 1);
                gm(1, 1) += g_dpre * mpre(0, 0) + g_dpost * p.cov2d(0, 0);
                gm(0, 1) += -g_dpre * mpre(0, 1) - g_dpost * p.cov2d(0, 1);
                gm(1, 0) += -g_dpre * mpre(1, 0) - g_dpost * p.cov2d(1, 0);
            }

            // 2D covariance -> camera covariance and Jacobian.
            const T qn = s.rotation.norm();
            const Vec4<T> qu = s.rotation / qn;
            const Mat3<T> rot = quat_from_wxyz<T>(qu).toRotationMatrix();
            const Mat3<T> m3 = rot * s.scale.asDiagonal();
            const Mat3<T> cov_cam = w_rot * (m3 * m3.transpose()) * w_rot.transpose();
            const T tx = p.cam_point.x(), ty = p.cam_point.y(), tz = p.cam_point.z();
            const T tz2 = tz * tz;
            Eigen::Matrix<T, 2, 3> jac;
            jac << fx / tz, T(0), -fx * tx / tz2,  //
                T(0), fy / tz, -fy * ty / tz2;

            const Mat3<T> g_cov_cam = jac.transpose() * gm * jac;
            const Eigen::Matrix<T, 2, 3> g_jac = T(2) * gm * jac * cov_cam;

            // Jacobian entries depend on the camera-space point.
            Vec3<T> g_cam = Vec3<T>::Zero();
            g_cam.x() += g_jac(0, 2) * (-fx / tz2);
            g_cam.y() += g_jac(1, 2) * (-fy / tz2);
            g_cam.z() += g_jac(0, 0) * (-fx / tz2) + g_jac(1, 1) * (-fy / tz2) +
                         g_jac(0, 2) * (T(2) * fx * tx / (tz2 * tz)) +
                         g_jac(1, 2) * (T(2) * fy * ty / (tz2 * tz));

            // Projected center and blended inverse depth.
            g_cam.x() += acc.mean2d.x() * fx / tz;
            g_cam.y() += acc.mean2d.y() * fy / tz;
            g_cam.z() += -acc.mean2d.x() * fx * tx / tz2 - acc.mean2d.y() * fy * ty / tz2;
            g_cam.z() += -acc.inv_depth / tz2;

            mean_grad += w_rot.transpose() * g_cam;
            out.mean[i] = mean_grad;

            // Camera covariance -> world covariance -> scale and rotation.
            const Mat3<T> g_cov3 = w_rot.transpose() * g_cov_cam * w_rot;
            const Mat3<T> g_m3 = T(2) * g_cov3 * m3;
            const Mat3<T> rt_gm3 = rot.transpose() * g_m3;
            out.scale[i] = Vec3<T>(rt_gm3(0, 0), rt_gm3(1, 1), rt_gm3(2, 2));
            const Mat3<T> g_rot = g_m3 * s.scale.asDiagonal();
            const Vec4<T> g_qu = detail::quat_grad_from_rot(qu, g_rot);
            out.rotation[i] = (g_qu - qu * qu.dot(g_qu)) / qn;
        }
    });
    return out;
}

// Cut-and-render convenience: select a cut at the target granularity,
// assemble the blended splats and rasterize them.
inline RenderOutput render_hierarchy(const Hierarchy& h, const CameraModel& cam, float tau,
                                     ForwardContext* ctx = nullptr,
                                     StageTimes* stages = nullptr) {
    std::vector<CutEntry> cut;
    {
        detail::StageTimer timer(stages ? &stages->cut_expand : nullptr);
        cut = select_cut(h, cam, tau);
    }
    std::vector<RenderSplat> splats;
    {
        detail::StageTimer timer(stages ? &stages->weights : nullptr);
        splats = cut_render_splats(h, cut);
    }
    return render_forward<float>(splats, cam, ctx, stages);
}

}  // namespace hsplat
