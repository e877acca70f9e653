#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "image.hpp"
#include "lod.hpp"
#include "render.hpp"

// Post-build optimization of interior nodes against training views, plus the
// self-contained regularization math: inverse-depth alignment and loss,
// per-camera exposure fitting, and the max-screen-gradient densification
// statistic.
namespace hsplat {

struct RefineConfig {
    float tau_min = 3.0f;   // granularity target range, pixels
    float tau_max = 48.0f;  // exclusive upper end
    int steps = 200;
    // Desk-scale step sizes per attribute (interior nodes only). Scale trains
    // in log space, falloff through an absolute-value activation, rotation on
    // raw quaternion coefficients. SH bands above 0 train at lr_sh / 20.
    float lr_mean = 1.6e-5f;
    float lr_scale = 5e-4f;
    float lr_rotation = 1e-4f;
    float lr_falloff = 5e-3f;
    float lr_sh = 2.5e-4f;
    std::uint64_t rng_seed = 0;
};

inline void validate_refine_config(const RefineConfig& cfg) {
    require(cfg.tau_min > 0.0f && cfg.tau_min < cfg.tau_max, Errc::InvalidArgument,
            "granularity range must satisfy 0 < tau_min < tau_max");
    require(cfg.steps >= 0, Errc::InvalidArgument, "step count must be non-negative");
    require(cfg.lr_mean >= 0 && cfg.lr_scale >= 0 && cfg.lr_rotation >= 0 &&
                cfg.lr_falloff >= 0 && cfg.lr_sh >= 0,
            Errc::InvalidArgument, "learning rates must be non-negative");
}

// Log-uniform granularity target: tau_max^xi * tau_min^(1-xi), xi in [0,1).
inline float sample_tau(float xi, const RefineConfig& cfg) {
    validate_refine_config(cfg);
    return std::pow(cfg.tau_max, xi) * std::pow(cfg.tau_min, 1.0f - xi);
}

// Weight of the depth term: exponential decay from 1 at step 0 down to 0.01
// at the final step of a run.
inline float depth_loss_weight(int step, int total_steps) {
    require(total_steps >= 1 && step >= 0 && step < total_steps, Errc::InvalidArgument,
            "step must lie inside the run");
    if (total_steps == 1) return 1.0f;
    const float u = static_cast<float>(step) / static_cast<float>(total_steps - 1);
    return std::pow(0.01f, u);
}

// Mean absolute difference between a rendered inverse-depth map and the
// aligned target; multiply by depth_loss_weight at the use site.
template <class T>
T depth_loss(const Image<T>& rendered, const Image<T>& target) {
    return l1_loss(rendered, target);
}

// Affine map bringing a relative inverse-depth map onto SfM scale, fitted
// with median / mean-absolute-deviation statistics over the observed pixels:
// D* = r*D + o, r = s(D_sfm)/s(D), o = t(D_sfm) - t(D)*r.
struct DepthAlignment {
    float scale_ratio = 1.0f;
    float offset = 0.0f;
};

namespace detail {

inline float median_of(std::vector<float> v) {
    const std::size_t m = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + m, v.end());
    float hi = v[m];
    if (v.size() % 2 == 0) {
        float lo = *std::max_element(v.begin(), v.begin() + m);
        return 0.5f * (lo + hi);
    }
    return hi;
}

inline float mean_abs_dev(const std::vector<float>& v, float center) {
    double s = 0.0;
    for (float x : v) s += std::abs(x - center);
    return static_cast<float>(s / v.size());
}

}  // namespace detail

inline DepthAlignment depth_alignment(const Image<float>& mono,
                                      std::span<const SfmObservation> obs) {
    require(mono.channels == 1 && mono.width > 0 && mono.height > 0, Errc::DimensionMismatch,
            "inverse-depth map must be a non-empty single-channel image");
    require(obs.size() >= 2, Errc::InvalidArgument,
            "depth alignment needs at least two observations");
    std::vector<float> d, d_sfm;
    d.reserve(obs.size());
    d_sfm.reserve(obs.size());
    for (const SfmObservation& o : obs) {
        const int u = static_cast<int>(o.pixel.x());
        const int v = static_cast<int>(o.pixel.y());
        require(u >= 0 && u < mono.width && v >= 0 && v < mono.height, Errc::InvalidArgument,
                "observation pixel outside the depth map");
        d.push_back(mono.at(u, v, 0));
        d_sfm.push_back(o.inv_depth);
    }
    const float t_d = detail::median_of(d);
    const float s_d = detail::mean_abs_dev(d, t_d);
    require(s_d > 0.0f, Errc::DegenerateSpread,
            "depth map has zero spread at the observed pixels");
    const float t_s = detail::median_of(d_sfm);
    const float s_s = detail::mean_abs_dev(d_sfm, t_s);
    DepthAlignment a;
    a.scale_ratio = s_s / s_d;
    a.offset = t_s - t_d * a.scale_ratio;
    return a;
}

// The statistics come from the observed pixels only; the transform applies to
// the whole map.
inline Image<float> align_depth(const Image<float>& mono, std::span<const SfmObservation> obs) {
    const DepthAlignment a = depth_alignment(mono, obs);
    Image<float> out = mono;
    for (float& v : out.data) v = a.scale_ratio * v + a.offset;
    return out;
}

// Warm-up ramp followed by log-linear decay; the schedule used for exposure
// fitting (initial 1e-3, final 1e-4, delay multiplier 1e-3 over the first
// 5000 steps).
inline double exposure_lr(int step, int max_steps, double lr_init = 1e-3, double lr_final = 1e-4,
                          double delay_mult = 1e-3, int delay_steps = 5000) {
    double delay = 1.0;
    if (delay_steps > 0) {
        const double u = std::clamp(static_cast<double>(step) / delay_steps, 0.0, 1.0);
        delay = delay_mult + (1.0 - delay_mult) * std::sin(0.5 * std::numbers::pi * u);
    }
    const double t = std::clamp(static_cast<double>(step) / std::max(1, max_steps), 0.0, 1.0);
    return delay * std::exp(std::log(lr_init) * (1.0 - t) + std::log(lr_final) * t);
}

// Per-image affine color calibration: adaptive-moment descent on the
// photometric loss of apply_exposure(render) vs. target, starting from [I|0].
inline std::vector<Mat34f> optimize_exposure(std::span<const Imagef> renders,
                                             std::span<const Imagef> targets, int steps) {
    require(renders.size() == targets.size(), Errc::DimensionMismatch,
            "need one target per render");
    require(steps >= 0, Errc::InvalidArgument, "step count must be non-negative");
    std::vector<Mat34f> out(renders.size(), CameraModel::identity_exposure());

    for (std::size_t img = 0; img < renders.size(); ++img) {
        const Imagef& render = renders[img];
        detail::check_pair_shape(render.width, render.height, render.channels,
                                 targets[img].width, targets[img].height,
                                 targets[img].channels);
        require(render.channels == 3, Errc::DimensionMismatch, "exposure expects RGB images");
        Mat34<double> e = out[img].cast<double>();
        Mat34<double> m = Mat34<double>::Zero(), v = Mat34<double>::Zero();
        const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        const std::size_t plane = static_cast<std::size_t>(render.width) * render.height;

        for (int step = 0; step < steps; ++step) {
            Imagef exposed = apply_exposure(render, e.cast<float>());
            Imagef lgrad;
            photometric_loss(exposed, targets[img], &lgrad);

            Mat34<double> g = Mat34<double>::Zero();
            for (std::size_t i = 0; i < plane; ++i) {
                const Eigen::Vector4d cin(render.data[i], render.data[plane + i],
                                          render.data[2 * plane + i], 1.0);
                const Eigen::Vector3d go(lgrad.data[i], lgrad.data[plane + i],
                                         lgrad.data[2 * plane + i]);
                g += go * cin.transpose();
            }

            const double lr = exposure_lr(step, steps);
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
            const double c1 = 1.0 - std::pow(beta1, step + 1);
            const double c2 = 1.0 - std::pow(beta2, step + 1);
            e -= lr * (m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix());
        }
        out[img] = e.cast<float>();
    }
    return out;
}

// Running maximum of observed screen-space gradient magnitudes, one scalar
// per tracked splat; the statistic a densification driver keys on.
inline std::vector<float> max_grad_stat(std::span<const std::vector<float>> history) {
    std::vector<float> out(history.size(), 0.0f);
    for (std::size_t i = 0; i < history.size(); ++i) {
        require(!history[i].empty(), Errc::InvalidArgument,
                "every tracked splat needs at least one observation");
        out[i] = *std::max_element(history[i].begin(), history[i].end());
    }
    return out;
}

struct RefineStats {
    std::vector<double> loss;            // photometric loss per step
    std::vector<float> max_screen_grad;  // per node, running max |d loss / d mean2d|
};

namespace detail {

// Trainable reparameterization of one node's attributes. Scale lives in log
// space (stays positive), falloff is signed with |.| as the effective value,
// rotation is a raw coefficient vector the renderer normalizes.
struct NodeParams {
    Vec3f mean = Vec3f::Zero();
    Vec3f log_scale = Vec3f::Zero();
    Vec4f quat = Vec4f(1, 0, 0, 0);
    float falloff = 1.0f;
    std::array<float, kShValues> sh{};
};

inline NodeParams params_from(const Gaussian& g) {
    NodeParams p;
    p.mean = g.mean;
    p.log_scale = g.scale.cwiseMax(1e-12f).array().log();
    p.quat = quat_coeffs_wxyz(g.rotation);
    p.falloff = g.falloff;
    p.sh = g.sh;
    return p;
}

inline Gaussian gaussian_from(const NodeParams& p) {
    Gaussian g;
    g.mean = p.mean;
    g.scale = p.log_scale.array().exp();
    const float qn = p.quat.norm();
    g.rotation = quat_from_wxyz<float>(qn > 0.0f ? Vec4f(p.quat / qn) : Vec4f(1, 0, 0, 0));
    g.falloff = std::abs(p.falloff);
    g.sh = p.sh;
    return g;
}

}  // namespace detail

// One optimization run over the interior nodes: each step draws a training
// view and a granularity target, renders the interpolated cut, and descends
// the photometric loss through the parent/child attribute blend and the
// opacity-split weights into both layers. Leaves are never touched; topology
// and bounds are constants. Returns the updated hierarchy.
inline Hierarchy refine_hierarchy(const Hierarchy& h, std::span<const CameraModel> cams,
                                  std::span<const Imagef> images, const RefineConfig& cfg,
                                  RefineStats* stats = nullptr) {
    validate_refine_config(cfg);
    require(!h.empty(), Errc::InvalidArgument, "refinement needs a hierarchy");
    require(cams.size() == images.size() && !cams.empty(), Errc::DimensionMismatch,
            "need one training image per camera");
    for (std::size_t i = 0; i < cams.size(); ++i) {
        validate_camera(cams[i]);
        require(images[i].width == cams[i].width && images[i].height == cams[i].height &&
                    images[i].channels == 3,
                Errc::DimensionMismatch, "training image shape must match its camera");
    }

    const std::size_t n = h.nodes.size();
    bool any_interior = false;
    for (const auto& node : h.nodes) any_interior |= !node.is_leaf();
    if (!any_interior)
        fail(Errc::NoInteriorNodes, "refinement has nothing to train without interior nodes");

    std::vector<detail::NodeParams> params(n);
    std::vector<Gaussian> eff(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (h.nodes[i].is_leaf())
            eff[i] = h.nodes[i].g;  // frozen; passed through verbatim
        else
            params[i] = detail::params_from(h.nodes[i].g);
    }

    if (stats) {
        stats->loss.clear();
        stats->max_screen_grad.assign(n, 0.0f);
    }

    std::mt19937_64 rng(cfg.rng_seed);
    std::uniform_int_distribution<std::size_t> pick_view(0, cams.size() - 1);
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);

    // Per-node gradient accumulators, reused across steps; a node enters
    // `touched` once per step, when its accumulators are zeroed.
    std::vector<Vec3f> g_mean(n), g_logscale(n);
    std::vector<Vec4f> g_quat(n);
    std::vector<float> g_falloff(n);
    std::vector<std::array<float, kShValues>> g_sh(n);
    std::vector<std::uint32_t> touched;
    std::vector<unsigned char> is_touched(n, 0);

    // d normalize(q) pulled back to q: (g - q_hat (q_hat . g)) / |q|.
    auto quat_norm_chain = [](const Vec4f& q, const Vec4f& g) {
        const float qn = q.norm();
        if (!(qn > 0.0f)) return Vec4f(Vec4f::Zero());
        const Vec4f qh = q / qn;
        return Vec4f((g - qh * qh.dot(g)) / qn);
    };

    for (int step = 0; step < cfg.steps; ++step) {
        const std::size_t view = pick_view(rng);
        const float tau = sample_tau(uni(rng), cfg);

        for (std::size_t i = 0; i < n; ++i)
            if (!h.nodes[i].is_leaf()) eff[i] = detail::gaussian_from(params[i]);

        const auto cut = select_cut(h, cams[view], tau);
        const auto splats =
            assemble_cut_splats<float>(h, std::span<const Gaussian>(eff), cut);
        ForwardContext ctx;
        const auto rendered = render_forward<float>(splats, cams[view], &ctx);
        const Imagef exposed = apply_exposure(rendered.color, cams[view].exposure);
        Imagef lgrad;
        const float loss = photometric_loss(exposed, images[view], &lgrad);
        const auto grads = render_backward<float>(ctx, lgrad);
        if (stats) stats->loss.push_back(loss);

        touched.clear();
        auto mark = [&](std::uint32_t i) {
            if (is_touched[i]) return;
            is_touched[i] = 1;
            touched.push_back(i);
            g_mean[i].setZero();
            g_logscale[i].setZero();
            g_quat[i].setZero();
            g_falloff[i] = 0.0f;
            g_sh[i].fill(0.0f);
        };

        // Chain splat gradients back to node parameters. A leaf target keeps
        // its share dropped (frozen); the parent side still trains.
        for (std::size_t k = 0; k < cut.size(); ++k) {
            const CutEntry& e = cut[k];
            const HierarchyNode& node = h.nodes[e.node];
            if (stats) {
                float& mg = stats->max_screen_grad[e.node];
                mg = std::max(mg, grads.mean2d[k].norm());
            }

            const bool plain = node.parent == kNoNode || e.t >= 1.0f;
            const float u = plain ? 1.0f : e.t;

            // w = this layer's share of the blended splat; the splat carried
            // the node's normalized, sign-aligned quaternion.
            auto add = [&](std::uint32_t idx, float w, float quat_sign) {
                if (h.nodes[idx].is_leaf()) return;
                mark(idx);
                g_mean[idx] += w * grads.mean[k];
                // d splat_scale / d log_scale = w * exp(log_scale)
                g_logscale[idx] += w * grads.scale[k].cwiseProduct(eff[idx].scale);
                g_quat[idx] +=
                    quat_norm_chain(params[idx].quat, (w * quat_sign) * grads.rotation[k]);
                for (int s = 0; s < kShValues; ++s) g_sh[idx][s] += w * grads.sh[k][s];
            };
            auto add_falloff = [&](std::uint32_t idx, float g) {
                if (h.nodes[idx].is_leaf()) return;
                mark(idx);
                g_falloff[idx] += g * (params[idx].falloff < 0.0f ? -1.0f : 1.0f);
            };

            if (plain) {
                add(e.node, 1.0f, 1.0f);
                add_falloff(e.node, grads.falloff[k]);
            } else {
                // The blended splat used sign-aligned child coefficients.
                const float qsign =
                    quat_coeffs_wxyz(eff[e.node].rotation)
                                .dot(quat_coeffs_wxyz(eff[node.parent].rotation)) < 0.0f
                        ? -1.0f
                        : 1.0f;
                add(e.node, u, qsign);
                add(node.parent, 1.0f - u, 1.0f);
                add_falloff(e.node, grads.falloff[k]);
                add_falloff(node.parent, grads.parent_falloff[k]);
            }
        }

        for (std::uint32_t i : touched) {
            detail::NodeParams& p = params[i];
            p.mean -= cfg.lr_mean * g_mean[i];
            p.log_scale -= cfg.lr_scale * g_logscale[i];
            p.quat -= cfg.lr_rotation * g_quat[i];
            p.falloff -= cfg.lr_falloff * g_falloff[i];
            for (int s = 0; s < kShValues; ++s)
                p.sh[s] -= (s < 3 ? cfg.lr_sh : cfg.lr_sh / 20.0f) * g_sh[i][s];
            is_touched[i] = 0;
        }
    }

    Hierarchy out = h;
    for (std::size_t i = 0; i < n; ++i)
        if (!h.nodes[i].is_leaf()) out.nodes[i].g = detail::gaussian_from(params[i]);
    return out;
}

}  // namespace hsplat
