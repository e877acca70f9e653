#include <catch2/catch_amalgamated.hpp>

#include <hsplat/build.hpp>
#include <hsplat/refine.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "support/fixtures.hpp"

using namespace hsplat;
using fixtures::Rng;

namespace {

struct FdTally {
    int pass = 0, total = 0;
    void add(double analytic, double fd) {
        total++;
        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-7});
        if (std::abs(analytic) < 1e-12 && std::abs(fd) < 1e-12)
            pass++;
        else if (std::abs(analytic - fd) / denom <= 0.02)
            pass++;
    }
};

template <class T>
Image<T> random_image(Rng& rng, int w, int h, int c, T lo = T(0), T hi = T(1)) {
    Image<T> img(w, h, c);
    std::uniform_real_distribution<double> uni(lo, hi);
    for (auto& v : img.data) v = static_cast<T>(uni(rng));
    return img;
}

bool nodes_bitwise_equal(const HierarchyNode& a, const HierarchyNode& b) {
    return a.parent == b.parent && a.first_child == b.first_child &&
           a.child_count == b.child_count &&
           std::memcmp(a.bounds.min.data(), b.bounds.min.data(), sizeof(Vec3f)) == 0 &&
           std::memcmp(a.bounds.max.data(), b.bounds.max.data(), sizeof(Vec3f)) == 0 &&
           std::memcmp(a.g.mean.data(), b.g.mean.data(), sizeof(Vec3f)) == 0 &&
           std::memcmp(a.g.scale.data(), b.g.scale.data(), sizeof(Vec3f)) == 0 &&
           std::memcmp(a.g.rotation.coeffs().data(), b.g.rotation.coeffs().data(),
                       4 * sizeof(float)) == 0 &&
           std::memcmp(&a.g.falloff, &b.g.falloff, sizeof(float)) == 0 &&
           std::memcmp(a.g.sh.data(), b.g.sh.data(), sizeof(a.g.sh)) == 0;
}

// Clustered scene plus a camera whose view keeps the whole cluster on screen.
std::vector<Gaussian> cluster_scene(Rng& rng, int n) {
    std::vector<Gaussian> leaves;
    leaves.reserve(n);
    for (int i = 0; i < n; ++i) {
        Gaussian g = fixtures::random_gaussian(rng, 1.5f, 0.05f, 0.18f, 0.35f, 0.9f);
        g.sh_at(0, 0) = fixtures::uniform(rng, 0.4f, 1.4f);
        g.sh_at(0, 1) = fixtures::uniform(rng, 0.4f, 1.4f);
        g.sh_at(0, 2) = fixtures::uniform(rng, 0.4f, 1.4f);
        for (int k = 3; k < kShValues; ++k) g.sh[k] *= 0.1f;
        leaves.push_back(g);
    }
    return leaves;
}

}  // namespace

TEST_CASE("granularity targets hit the range endpoints and geometric midpoint", "[refine]") {
    RefineConfig cfg;
    cfg.tau_min = 3.0f;
    cfg.tau_max = 48.0f;
    CHECK(sample_tau(0.0f, cfg) == 3.0f);
    CHECK(sample_tau(1.0f, cfg) == 48.0f);
    CHECK_THAT(sample_tau(0.5f, cfg), Catch::Matchers::WithinRel(12.0f, 1e-6f));

    RefineConfig bad = cfg;
    bad.tau_min = 0.0f;
    CHECK_THROWS_AS(sample_tau(0.5f, bad), Error);
    bad = cfg;
    bad.tau_max = cfg.tau_min;
    CHECK_THROWS_AS(sample_tau(0.5f, bad), Error);
    bad = cfg;
    bad.lr_mean = -1.0f;
    CHECK_THROWS_AS(validate_refine_config(bad), Error);
}

TEST_CASE("granularity targets are log-uniform", "[refine]") {
    RefineConfig cfg;
    cfg.tau_min = 2.0f;
    cfg.tau_max = 60.0f;
    const int n = 10000;
    Rng rng(311);
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    std::vector<double> u(n);
    const double lmin = std::log(2.0), lmax = std::log(60.0);
    for (int i = 0; i < n; ++i)
        u[i] = (std::log(sample_tau(uni(rng), cfg)) - lmin) / (lmax - lmin);
    std::sort(u.begin(), u.end());

    // Kolmogorov-Smirnov against the uniform CDF; 1.6276/sqrt(n) is the
    // two-sided p = 0.01 critical value.
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
        d = std::max(d, u[i] - static_cast<double>(i) / n);
        d = std::max(d, static_cast<double>(i + 1) / n - u[i]);
    }
    CHECK(d < 1.6276 / std::sqrt(static_cast<double>(n)));
    CHECK(u.front() >= -1e-6);
    CHECK(u.back() <= 1.0 + 1e-6);
}

TEST_CASE("depth weight schedule decays from 1 to 0.01", "[refine]") {
    CHECK(depth_loss_weight(0, 200) == 1.0f);
    CHECK_THAT(depth_loss_weight(199, 200), Catch::Matchers::WithinRel(0.01f, 1e-5f));
    CHECK(depth_loss_weight(0, 1) == 1.0f);
    for (int s = 1; s < 200; ++s) CHECK(depth_loss_weight(s, 200) < depth_loss_weight(s - 1, 200));
    CHECK_THROWS_AS(depth_loss_weight(200, 200), Error);
    CHECK_THROWS_AS(depth_loss_weight(-1, 200), Error);
}

TEST_CASE("depth loss is the mean absolute difference", "[refine]") {
    Rng rng(99);
    Image<float> a = random_image<float>(rng, 9, 7, 1);
    CHECK(depth_loss(a, a) == 0.0f);
    Image<float> b = a;
    for (auto& v : b.data) v += 0.5f;
    CHECK_THAT(depth_loss(a, b), Catch::Matchers::WithinRel(0.5f, 1e-6f));
}

TEST_CASE("depth alignment recovers affine maps from sparse observations", "[refine]") {
    Rng rng(7);
    Image<float> mono = random_image<float>(rng, 20, 14, 1, 0.2f, 2.0f);

    std::vector<SfmObservation> obs;
    for (int i = 0; i < 25; ++i) {
        SfmObservation o;
        o.pixel = Vec2f(static_cast<float>(i % 20), static_cast<float>((i * 7) % 14));
        obs.push_back(o);
    }

    SECTION("observations equal to the map leave it in place") {
        for (auto& o : obs)
            o.inv_depth = mono.at(static_cast<int>(o.pixel.x()), static_cast<int>(o.pixel.y()), 0);
        DepthAlignment a = depth_alignment(mono, obs);
        CHECK(a.scale_ratio == 1.0f);
        CHECK(a.offset == 0.0f);
    }

    SECTION("an affine relation is recovered exactly, even observation count") {
        // Hand case: map values {1,2,3,5} observed; targets 2x+1. Median of
        // the even-sized sample is the middle pair's average.
        Image<float> tiny(4, 1, 1);
        tiny.data = {1.0f, 2.0f, 3.0f, 5.0f};
        std::vector<SfmObservation> tobs(4);
        for (int i = 0; i < 4; ++i) {
            tobs[i].pixel = Vec2f(static_cast<float>(i), 0.0f);
            tobs[i].inv_depth = 2.0f * tiny.data[i] + 1.0f;
        }
        DepthAlignment a = depth_alignment(tiny, tobs);
        CHECK_THAT(a.scale_ratio, Catch::Matchers::WithinRel(2.0f, 1e-6f));
        CHECK_THAT(a.offset, Catch::Matchers::WithinRel(1.0f, 1e-5f));

        for (auto& o : obs)
            o.inv_depth =
                2.0f * mono.at(static_cast<int>(o.pixel.x()), static_cast<int>(o.pixel.y()), 0) +
                1.0f;
        Image<float> aligned = align_depth(mono, obs);
        for (std::size_t i = 0; i < mono.data.size(); ++i)
            CHECK_THAT(aligned.data[i],
                       Catch::Matchers::WithinRel(2.0f * mono.data[i] + 1.0f, 1e-5f));
    }

    SECTION("degenerate and invalid inputs") {
        Image<float> flat(6, 6, 1, 0.7f);
        std::vector<SfmObservation> fobs(5);
        for (int i = 0; i < 5; ++i) {
            fobs[i].pixel = Vec2f(static_cast<float>(i), 2.0f);
            fobs[i].inv_depth = static_cast<float>(i);
        }
        CHECK_THROWS_MATCHES(depth_alignment(flat, fobs), Error,
                             Catch::Matchers::Predicate<Error>([](const Error& e) {
                                 return e.code() == Errc::DegenerateSpread;
                             }));
        CHECK_THROWS_AS(depth_alignment(mono, std::span<const SfmObservation>(obs.data(), 1)),
                        Error);
        std::vector<SfmObservation> oob = {SfmObservation{}, SfmObservation{}};
        oob[1].pixel = Vec2f(100.0f, 0.0f);
        CHECK_THROWS_AS(depth_alignment(mono, oob), Error);
    }
}

TEST_CASE("ssim gradient matches finite differences", "[refine][grad]") {
    Rng rng(42);
    Image<double> pred = random_image<double>(rng, 14, 11, 3);
    Image<double> target = random_image<double>(rng, 14, 11, 3);

    Image<double> sgrad, pgrad;
    ssim(pred, target, &sgrad);
    photometric_loss(pred, target, &pgrad);

    std::uniform_int_distribution<std::size_t> pick(0, pred.data.size() - 1);
    FdTally st, pt;
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t i = pick(rng);
        const double h = 1e-6;
        Image<double> plus = pred, minus = pred;
        plus.data[i] += h;
        minus.data[i] -= h;
        st.add(sgrad.data[i], (ssim(plus, target) - ssim(minus, target)) / (2 * h));
        pt.add(pgrad.data[i],
               (photometric_loss(plus, target) - photometric_loss(minus, target)) / (2 * h));
    }
    CHECK(st.total == 60);
    CHECK(st.pass == st.total);
    CHECK(pt.pass == pt.total);

    // Identical images sit at the SSIM maximum: value 1, gradient exactly 0.
    Image<double> g;
    CHECK(ssim(pred, pred, &g) == 1.0);
    for (double v : g.data) CHECK(v == 0.0);
    CHECK(photometric_loss(pred, pred, &g) == 0.0);
    for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("exposure fitting recovers affine color corruptions", "[refine]") {
    Rng rng(2024);
    std::vector<Imagef> renders, targets;
    renders.push_back(random_image<float>(rng, 16, 12, 3, 0.1f, 0.6f));

    SECTION("matching target keeps the identity exactly") {
        targets.push_back(renders[0]);
        auto e = optimize_exposure(renders, targets, 50);
        CHECK((e[0] - CameraModel::identity_exposure()).cwiseAbs().maxCoeff() == 0.0f);
    }

    SECTION("gain is recovered within 2 percent") {
        Imagef t = renders[0];
        for (auto& v : t.data) v *= 1.5f;
        targets.push_back(t);
        auto e = optimize_exposure(renders, targets, 8000);
        for (int c = 0; c < 3; ++c)
            CHECK_THAT(e[0](c, c), Catch::Matchers::WithinAbs(1.5f, 0.03f));
    }

    SECTION("bias is recovered within 2 percent") {
        Imagef t = renders[0];
        for (auto& v : t.data) v += 0.15f;
        targets.push_back(t);
        auto e = optimize_exposure(renders, targets, 8000);
        for (int c = 0; c < 3; ++c) {
            CHECK_THAT(e[0](c, 3), Catch::Matchers::WithinAbs(0.15f, 0.003f));
            CHECK_THAT(e[0](c, c), Catch::Matchers::WithinAbs(1.0f, 0.02f));
        }
    }

    SECTION("shape mismatches are rejected") {
        targets.push_back(random_image<float>(rng, 8, 8, 3));
        CHECK_THROWS_AS(optimize_exposure(renders, targets, 1), Error);
    }
}

TEST_CASE("max-gradient statistic is the running maximum", "[refine]") {
    std::vector<std::vector<float>> history = {{0.1f, 0.5f, 0.2f}, {0.7f}};
    auto stat = max_grad_stat(history);
    CHECK(stat.size() == 2);
    CHECK(stat[0] == 0.5f);
    CHECK(stat[1] == 0.7f);

    Rng rng(5);
    std::vector<std::vector<float>> rnd(10);
    for (auto& v : rnd) {
        v.resize(1 + rng() % 20);
        for (auto& x : v) x = fixtures::uniform(rng, -3.0f, 3.0f);
    }
    auto s = max_grad_stat(rnd);
    for (std::size_t i = 0; i < rnd.size(); ++i) {
        const float mean = std::accumulate(rnd[i].begin(), rnd[i].end(), 0.0f) / rnd[i].size();
        CHECK(s[i] >= mean);
    }

    std::vector<std::vector<float>> empty_obs = {{}};
    CHECK_THROWS_AS(max_grad_stat(empty_obs), Error);
}

TEST_CASE("refinement without interior nodes is an error", "[refine]") {
    Rng rng(1);
    std::vector<Gaussian> one = {fixtures::random_gaussian(rng)};
    Hierarchy h = build_bvh(one);
    REQUIRE(h.nodes.size() == 1);
    std::vector<CameraModel> cams = {
        fixtures::look_at_camera(Vec3f(0, 0, -6), Vec3f(0, 0, 0), 32, 32, 40.0f)};
    std::vector<Imagef> imgs = {Imagef(32, 32, 3, 0.5f)};
    RefineConfig cfg;
    cfg.steps = 1;
    CHECK_THROWS_MATCHES(refine_hierarchy(h, cams, imgs, cfg), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == Errc::NoInteriorNodes;
                         }));
}

TEST_CASE("leaf-only cuts leave every parameter in place", "[refine]") {
    Rng rng(17);
    auto leaves = cluster_scene(rng, 24);
    Hierarchy h = build_bvh(leaves);
    CameraModel cam = fixtures::look_at_camera(Vec3f(0.5f, 0.3f, -8), Vec3f(0, 0, 0), 48, 48, 60.0f);

    // Granularity targets far below any node's footprint: the cut is all
    // leaves, everything trainable is out of the picture.
    RefineConfig cfg;
    cfg.tau_min = 1e-4f;
    cfg.tau_max = 2e-4f;
    cfg.steps = 10;
    auto cut = select_cut(h, cam, cfg.tau_min);
    REQUIRE(cut.size() == h.leaf_count());
    for (const auto& e : cut) CHECK(e.t == 1.0f);

    std::vector<CameraModel> cams = {cam};
    std::vector<Imagef> imgs = {Imagef(48, 48, 3)};
    Hierarchy out = refine_hierarchy(h, cams, imgs, cfg);
    REQUIRE(out.nodes.size() == h.nodes.size());
    for (std::size_t i = 0; i < h.nodes.size(); ++i) {
        if (h.nodes[i].is_leaf()) {
            CHECK(nodes_bitwise_equal(out.nodes[i], h.nodes[i]));
            continue;
        }
        // Interior attributes only pass through the reparameterization round
        // trip (log/exp, normalize, absolute value).
        const Gaussian &a = h.nodes[i].g, &b = out.nodes[i].g;
        CHECK((a.mean - b.mean).isZero(0.0f));
        CHECK(b.falloff == a.falloff);
        CHECK((a.scale - b.scale).norm() <= 1e-6f * a.scale.norm());
        CHECK(std::abs(std::abs(a.rotation.dot(b.rotation)) - 1.0f) < 1e-6f);
        for (int k = 0; k < kShValues; ++k) CHECK(a.sh[k] == b.sh[k]);
    }
}

TEST_CASE("refinement end-to-end gradients match finite differences", "[refine][grad]") {
    // Two levels, three leaves: the root is the only trainable node. The cut
    // is forced into the transition regime so gradients cross the attribute
    // blend and the opacity split on their way to the root parameters.
    Rng rng(88);
    std::vector<Gaussian> leaves;
    for (int i = 0; i < 3; ++i) {
        Gaussian g = fixtures::random_gaussian(rng, 0.9f, 0.25f, 0.5f, 0.45f, 0.8f);
        g.sh_at(0, 0) = fixtures::uniform(rng, 0.8f, 1.3f);
        g.sh_at(0, 1) = fixtures::uniform(rng, 0.8f, 1.3f);
        g.sh_at(0, 2) = fixtures::uniform(rng, 0.8f, 1.3f);
        leaves.push_back(g);
    }
    Hierarchy h;
    {
        HierarchyNode root;
        root.first_child = 1;
        root.child_count = 3;
        root.g = merge_gaussians(leaves);
        for (const auto& g : leaves) root.bounds.expand(leaf_aabb(g));
        h.nodes.push_back(root);
        for (const auto& g : leaves) {
            HierarchyNode n;
            n.parent = 0;
            n.g = g;
            n.bounds = leaf_aabb(g);
            h.nodes.push_back(n);
        }
        validate_hierarchy(h);
    }

    CameraModel cam = fixtures::look_at_camera(Vec3f(0.8f, -0.5f, -7), h.nodes[0].g.mean, 40, 36,
                                               45.0f);
    const float eps_root = granularity(h.nodes[0].bounds, cam);
    float eps_kid_max = 0.0f;
    for (std::size_t i = 1; i < 4; ++i)
        eps_kid_max = std::max(eps_kid_max, granularity(h.nodes[i].bounds, cam));
    REQUIRE(eps_kid_max < eps_root);
    const float tau = 0.5f * (eps_kid_max + eps_root);

    const auto cut = select_cut(h, cam, tau);
    REQUIRE(cut.size() == 3);
    for (const auto& e : cut) {
        REQUIRE(e.t > 0.0f);
        REQUIRE(e.t < 1.0f);
    }

    Rng img_rng(5);
    const Image<double> target = random_image<double>(img_rng, 40, 36, 3);

    // Double-precision mirror of the trainable reparameterization.
    struct Params {
        Vec3<double> mean, log_scale;
        Vec4<double> quat;
        double falloff;
        std::array<double, kShValues> sh;
    } p0;
    p0.mean = h.nodes[0].g.mean.cast<double>();
    p0.log_scale = h.nodes[0].g.scale.cast<double>().array().log();
    p0.quat = quat_coeffs_wxyz(h.nodes[0].g.rotation).cast<double>().eval();
    p0.falloff = h.nodes[0].g.falloff;
    for (int k = 0; k < kShValues; ++k) p0.sh[k] = h.nodes[0].g.sh[k];

    auto effective = [&](const Params& p) {
        std::vector<GaussianT<double>> eff(4);
        GaussianT<double>& r = eff[0];
        r.mean = p.mean;
        r.scale = p.log_scale.array().exp();
        const Vec4<double> qn = p.quat / p.quat.norm();
        r.rotation = quat_from_wxyz<double>(qn);
        r.falloff = std::abs(p.falloff);
        for (int k = 0; k < kShValues; ++k) r.sh[k] = p.sh[k];
        for (std::size_t i = 1; i < 4; ++i) eff[i] = h.nodes[i].g.cast<double>();
        return eff;
    };
    auto eval = [&](const Params& p, ForwardContextT<double>* ctx) {
        const auto eff = effective(p);
        const auto splats = assemble_cut_splats<double>(h, eff, cut);
        const auto out = render_forward<double>(splats, cam, ctx);
        return static_cast<double>(
            photometric_loss(apply_exposure(out.color, cam.exposure), target));
    };

    // Analytic gradient: renderer backward chained through the blend weights,
    // quaternion normalization, log-scale and absolute-value activations. The
    // root only ever appears as the parent side of the blend, whose
    // coefficients carry no sign alignment.
    ForwardContextT<double> ctx;
    Image<double> lgrad;
    {
        const auto eff = effective(p0);
        const auto splats = assemble_cut_splats<double>(h, eff, cut);
        auto fwd = render_forward<double>(splats, cam, &ctx);
        photometric_loss(apply_exposure(fwd.color, cam.exposure), target, &lgrad);
    }
    const auto grads = render_backward<double>(ctx, lgrad);

    Params g{};
    g.mean.setZero();
    g.log_scale.setZero();
    g.quat.setZero();
    g.falloff = 0.0;
    g.sh.fill(0.0);
    const auto eff0 = effective(p0);
    for (std::size_t k = 0; k < cut.size(); ++k) {
        const double w = 1.0 - cut[k].t;
        g.mean += w * grads.mean[k];
        g.log_scale += w * grads.scale[k].cwiseProduct(eff0[0].scale);
        const Vec4<double> graw = w * grads.rotation[k];
        const double qn = p0.quat.norm();
        const Vec4<double> qh = p0.quat / qn;
        g.quat += (graw - qh * qh.dot(graw)) / qn;
        g.falloff += grads.parent_falloff[k] * (p0.falloff < 0.0 ? -1.0 : 1.0);
        for (int s = 0; s < kShValues; ++s) g.sh[s] += w * grads.sh[k][s];
    }

    FdTally tally;
    auto fd = [&](auto&& poke, double analytic) {
        const double h_base = 1e-5;
        Params plus = p0, minus = p0;
        poke(plus, +h_base);
        poke(minus, -h_base);
        tally.add(analytic, (eval(plus, nullptr) - eval(minus, nullptr)) / (2 * h_base));
    };
    for (int c = 0; c < 3; ++c)
        fd([&](Params& p, double d) { p.mean[c] += d; }, g.mean[c]);
    for (int c = 0; c < 3; ++c)
        fd([&](Params& p, double d) { p.log_scale[c] += d; }, g.log_scale[c]);
    for (int c = 0; c < 4; ++c)
        fd([&](Params& p, double d) { p.quat[c] += d; }, g.quat[c]);
    fd([&](Params& p, double d) { p.falloff += d; }, g.falloff);
    for (int s = 0; s < kShValues; ++s)
        fd([&](Params& p, double d) { p.sh[s] += d; }, g.sh[s]);

    CHECK(tally.total == 59);
    CHECK(tally.pass >= static_cast<int>(0.95 * tally.total));
}

TEST_CASE("refinement decreases the loss and freezes the leaves", "[refine]") {
    Rng rng(404);
    auto leaves = cluster_scene(rng, 60);
    Hierarchy h = build_bvh(leaves);
    CameraModel cam =
        fixtures::look_at_camera(Vec3f(0.4f, -0.6f, -7.5f), Vec3f(0, 0, 0), 96, 96, 90.0f);

    // Ground truth: the scene rendered at leaf level.
    std::vector<RenderSplat> plain;
    for (const auto& g : leaves) plain.push_back(RenderSplat::plain(g));
    auto gt = render_forward<float>(plain, cam);
    std::vector<Imagef> targets = {apply_exposure(gt.color, cam.exposure)};
    std::vector<CameraModel> cams = {cam};

    // Fixed coarse granularity so the same interior cut trains every step.
    RefineConfig cfg;
    cfg.tau_min = 25.0f;
    cfg.tau_max = 25.001f;
    cfg.steps = 120;
    cfg.lr_mean = 1.6e-4f;
    cfg.lr_scale = 5e-3f;
    cfg.lr_rotation = 1e-3f;
    cfg.lr_falloff = 5e-2f;
    cfg.lr_sh = 2.5e-3f;

    auto cut = select_cut(h, cam, cfg.tau_min);
    REQUIRE(cut.size() < h.leaf_count());  // interiors are actually selected

    RefineStats stats;
    Hierarchy out = refine_hierarchy(h, cams, targets, cfg, &stats);

    REQUIRE(stats.loss.size() == static_cast<std::size_t>(cfg.steps));
    const int window = 20;
    const double first = std::accumulate(stats.loss.begin(), stats.loss.begin() + window, 0.0);
    const double last = std::accumulate(stats.loss.end() - window, stats.loss.end(), 0.0);
    CHECK(last < first);

    REQUIRE(out.nodes.size() == h.nodes.size());
    std::size_t changed_interiors = 0;
    for (std::size_t i = 0; i < h.nodes.size(); ++i) {
        CHECK(out.nodes[i].parent == h.nodes[i].parent);
        CHECK(out.nodes[i].first_child == h.nodes[i].first_child);
        CHECK(out.nodes[i].child_count == h.nodes[i].child_count);
        if (h.nodes[i].is_leaf()) {
            CHECK(nodes_bitwise_equal(out.nodes[i], h.nodes[i]));
        } else {
            CHECK(out.nodes[i].g.falloff >= 0.0f);
            CHECK((out.nodes[i].g.scale.array() > 0.0f).all());
            changed_interiors += !nodes_bitwise_equal(out.nodes[i], h.nodes[i]);
        }
    }
    CHECK(changed_interiors > 0);

    // The densification statistic saw the trained nodes.
    REQUIRE(stats.max_screen_grad.size() == h.nodes.size());
    float max_stat = 0.0f;
    for (float v : stats.max_screen_grad) max_stat = std::max(max_stat, v);
    CHECK(max_stat > 0.0f);
}

TEST_CASE("refinement is deterministic for a fixed seed", "[refine]") {
    Rng rng(31);
    auto leaves = cluster_scene(rng, 20);
    Hierarchy h = build_bvh(leaves);
    CameraModel cam = fixtures::look_at_camera(Vec3f(0, 0.4f, -6), Vec3f(0, 0, 0), 48, 48, 50.0f);
    std::vector<Imagef> targets = {random_image<float>(rng, 48, 48, 3)};
    std::vector<CameraModel> cams = {cam};

    RefineConfig cfg;
    cfg.tau_min = 8.0f;
    cfg.tau_max = 30.0f;
    cfg.steps = 12;
    cfg.rng_seed = 9001;

    Hierarchy a = refine_hierarchy(h, cams, targets, cfg);
    Hierarchy b = refine_hierarchy(h, cams, targets, cfg);
    REQUIRE(a.nodes.size() == b.nodes.size());
    for (std::size_t i = 0; i < a.nodes.size(); ++i) CHECK(nodes_bitwise_equal(a.nodes[i], b.nodes[i]));
}
