#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "gradcheck.hpp"
#include "rng.hpp"
#include "vae.hpp"

using dv::Graph;
using dv::Graph64;
using dv::Rng;
using dv::Tensor;
using dv::Tensor64;
using dv::VaeConfig;
using dv::VaeModel;

static VaeConfig toy_cfg() {
    VaeConfig c;
    c.base_channels = 2;
    c.latent_channels = 2;
    c.blocks_per_stage = 1;
    c.stage_multipliers = {1, 2, 2, 2};
    return c;
}

static VaeModel toy_model(uint64_t seed) {
    VaeModel m;
    m.cfg = toy_cfg();
    m.init(seed);
    return m;
}

// bitwise comparison of one temporal frame
static bool frame_equal(const Tensor& a, const Tensor& b, int64_t t) {
    const int64_t plane = a.numel() / a.shape[0];
    return std::memcmp(a.ptr() + t * plane, b.ptr() + t * plane, sizeof(float) * (size_t)plane) ==
           0;
}

static Tensor perturbed_frame(const Tensor& x, int64_t t, float delta) {
    Tensor y = x;
    const int64_t plane = x.numel() / x.shape[0];
    for (int64_t i = 0; i < plane; ++i) y[t * plane + i] += delta;
    return y;
}

struct PadHookGuard {
    PadHookGuard() { dv::test_hooks::break_causal_pad = true; }
    ~PadHookGuard() { dv::test_hooks::break_causal_pad = false; }
};

TEST_CASE("encode and decode shapes, including the single-image case") {
    VaeModel m = toy_model(1);
    Rng rng(11);

    auto d1 = dv::vae_encode(m, dv::randn<float>(rng, {1, 32, 32, 3}));
    CHECK(d1.mean.shape == std::vector<int64_t>({1, 4, 4, 2}));
    CHECK(d1.logvar.shape == std::vector<int64_t>({1, 4, 4, 2}));

    auto d17 = dv::vae_encode(m, dv::randn<float>(rng, {17, 16, 16, 3}));
    CHECK(d17.mean.shape == std::vector<int64_t>({5, 2, 2, 2}));

    CHECK(dv::vae_decode(m, d1.mean).shape == std::vector<int64_t>({1, 32, 32, 3}));
    CHECK(dv::vae_decode(m, d17.mean).shape == std::vector<int64_t>({17, 16, 16, 3}));

    for (int64_t T : {1, 5, 13}) {
        Tensor v = dv::randn<float>(rng, {T, 8, 8, 3});
        CHECK(dv::vae_decode(m, dv::vae_encode(m, v).mean).shape == v.shape);
    }

    CHECK_THROWS_WITH_AS((void)dv::vae_encode(m, Tensor({2, 8, 8, 3})),
                         "vae: frame count must be 1 mod 4", std::runtime_error);
    CHECK_THROWS_WITH_AS((void)dv::vae_encode(m, Tensor({5, 30, 8, 3})),
                         "vae: height and width must be divisible by 8", std::runtime_error);
    CHECK_THROWS_WITH_AS((void)dv::vae_encode(m, Tensor({5, 8, 8, 1})),
                         "vae: video must be (T,H,W,3)", std::runtime_error);

    Tensor bad({1, 2, 2, 2});
    bad[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS((void)dv::vae_decode(m, bad), "vae: non-finite latent",
                         std::runtime_error);
}

TEST_CASE("latent frame i never sees input frames past 4i") {
    VaeModel m = toy_model(2);
    Rng rng(21);
    Tensor v = dv::randn<float>(rng, {17, 8, 8, 3});
    auto base = dv::vae_encode(m, v);

    struct Case {
        int64_t frame;
        int64_t unchanged;  // latent frames [0, unchanged) must be identical
    };
    for (Case c : {Case{16, 4}, Case{9, 3}, Case{5, 2}, Case{1, 1}}) {
        auto got = dv::vae_encode(m, perturbed_frame(v, c.frame, 0.7f));
        for (int64_t i = 0; i < c.unchanged; ++i) {
            CHECK(frame_equal(base.mean, got.mean, i));
            CHECK(frame_equal(base.logvar, got.logvar, i));
        }
        bool later_changed = false;
        for (int64_t i = c.unchanged; i < 5; ++i)
            later_changed = later_changed || !frame_equal(base.mean, got.mean, i);
        CHECK(later_changed);
    }

    // the first latent frame depends on frame 0 alone, so encoding the
    // leading frame as an image reproduces it exactly
    Tensor first({1, 8, 8, 3});
    std::memcpy(first.ptr(), v.ptr(), sizeof(float) * (size_t)first.numel());
    auto img = dv::vae_encode(m, first);
    CHECK(frame_equal(base.mean, img.mean, 0));
    CHECK(frame_equal(base.logvar, img.logvar, 0));
}

TEST_CASE("output frame j never sees latent frames past ceil(j/4)") {
    VaeModel m = toy_model(3);
    Rng rng(31);
    Tensor z = dv::randn<float>(rng, {5, 2, 2, 2});
    Tensor base = dv::vae_decode(m, z);
    REQUIRE(base.shape[0] == 17);

    struct Case {
        int64_t frame;
        int64_t unchanged;  // output frames [0, unchanged) must be identical
    };
    for (Case c : {Case{4, 13}, Case{2, 5}, Case{1, 1}}) {
        Tensor got = dv::vae_decode(m, perturbed_frame(z, c.frame, 0.7f));
        for (int64_t j = 0; j < c.unchanged; ++j) CHECK(frame_equal(base, got, j));
        bool later_changed = false;
        for (int64_t j = c.unchanged; j < 17; ++j)
            later_changed = later_changed || !frame_equal(base, got, j);
        CHECK(later_changed);
    }
}

TEST_CASE("centered padding would leak future frames into early latents") {
    VaeModel m = toy_model(4);
    Rng rng(41);
    Tensor v = dv::randn<float>(rng, {17, 8, 8, 3});

    PadHookGuard guard;
    auto base = dv::vae_encode(m, v);
    auto got = dv::vae_encode(m, perturbed_frame(v, 16, 0.7f));
    bool early_changed = false;
    for (int64_t i = 0; i < 4; ++i)
        early_changed = early_changed || !frame_equal(base.mean, got.mean, i);
    CHECK(early_changed);
}

TEST_CASE("graph runner and plain runner produce identical values") {
    VaeModel m = toy_model(5);
    Rng rng(51);
    Tensor v = dv::randn<float>(rng, {5, 16, 16, 3});

    auto plain = dv::vae_encode(m, v);
    Graph g;
    auto B = dv::bind_named(g, m.ps);
    auto [mean_id, logvar_id] = dv::vae_encode_graph(g, B, m, g.input(v));
    CHECK(dv::max_abs_diff(g.val(mean_id), plain.mean) == 0.0f);
    CHECK(dv::max_abs_diff(g.val(logvar_id), plain.logvar) == 0.0f);

    Tensor dec_plain = dv::vae_decode(m, plain.mean);
    int dec_id = dv::vae_decode_graph(g, B, m, g.input(plain.mean));
    CHECK(dv::max_abs_diff(g.val(dec_id), dec_plain) == 0.0f);
}

TEST_CASE("kl of the standard normal is zero; unit mean costs one half per element") {
    Graph g;
    int mu0 = g.input(Tensor({2, 2}));
    int lv0 = g.input(Tensor({2, 2}));
    CHECK(g.val(g.kl_mean(mu0, lv0))[0] == 0.0f);

    Tensor ones({2, 2}, std::vector<float>(4, 1.0f));
    int mu1 = g.input(ones);
    CHECK(g.val(g.kl_mean(mu1, lv0))[0] == 0.5f);

    // kl stays non-negative on random inputs
    Rng rng(61);
    for (int trial = 0; trial < 20; ++trial) {
        int mu = g.input(dv::randn<float>(rng, {3, 4}));
        int lv = g.input(dv::randn<float>(rng, {3, 4}));
        CHECK(g.val(g.kl_mean(mu, lv))[0] >= 0.0f);
    }
}

TEST_CASE("loss formula: perfect reconstruction with a standard-normal posterior costs zero") {
    VaeConfig cfg = toy_cfg();
    dv::Perceptual pc;
    pc.init(7);

    Rng rng(71);
    Tensor video = dv::randn<float>(rng, {5, 8, 8, 3});
    Graph g;
    int v = g.input(video);
    auto PP = dv::bind_frozen(g, pc.ps);
    int perc = dv::perceptual_graph(g, PP, pc, v, v);
    int mu = g.input(Tensor({2, 1, 1, 2}));
    int lv = g.input(Tensor({2, 1, 1, 2}));
    auto n = dv::vae_loss_terms(g, cfg, v, v, mu, lv, perc, -1);
    CHECK(g.val(n.total)[0] == 0.0f);
    CHECK(n.gan == -1);

    // l2 component against a 64-bit oracle
    Tensor a = dv::randn<float>(rng, {5, 8, 8, 3});
    int ai = g.input(a);
    auto n2 = dv::vae_loss_terms(g, cfg, v, ai, mu, lv, -1, -1);
    double want = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = (double)a[i] - (double)video[i];
        want += d * d;
    }
    want /= (double)a.numel();
    CHECK(std::abs((double)g.val(n2.l2)[0] - want) < 1e-6 * want);
}

TEST_CASE("non-finite loss component reports its name") {
    VaeConfig cfg = toy_cfg();
    Graph g;
    Tensor video({1, 8, 8, 3});
    Tensor recon({1, 8, 8, 3});
    recon[0] = std::numeric_limits<float>::infinity();
    int v = g.input(video);
    int r = g.input(recon);
    int mu = g.input(Tensor({1, 1, 1, 2}));
    CHECK_THROWS_WITH_AS((void)dv::vae_loss_terms(g, cfg, v, r, mu, mu, -1, -1),
                         "vae: non-finite l2 component", std::runtime_error);
}

TEST_CASE("perceptual distance: zero on equal inputs, symmetric, reproducible from its seed") {
    dv::Perceptual pc;
    pc.init(7);
    Rng rng(81);
    Tensor a = dv::randn<float>(rng, {5, 16, 16, 3});
    Tensor b = dv::randn<float>(rng, {5, 16, 16, 3});

    CHECK(dv::perceptual_value(pc, a, a) == 0.0);
    CHECK(dv::perceptual_value(pc, a, b) == dv::perceptual_value(pc, b, a));
    CHECK(dv::perceptual_value(pc, a, b) > 0.0);

    dv::Perceptual again;
    again.init(7);
    CHECK(dv::perceptual_value(again, a, b) == dv::perceptual_value(pc, a, b));
    dv::Perceptual other;
    other.init(8);
    CHECK(dv::perceptual_value(other, a, b) != dv::perceptual_value(pc, a, b));
}

TEST_CASE("hinge losses: saturated cases hit zero, random logits match a 64-bit oracle") {
    Graph g;
    Tensor real({2, 2}, std::vector<float>(4, 2.0f));
    Tensor fake({2, 2}, std::vector<float>(4, -2.0f));
    CHECK(g.val(dv::hinge_d_loss(g, g.input(real), g.input(fake)))[0] == 0.0f);
    CHECK(g.val(dv::hinge_g_loss(g, g.input(Tensor({2, 2}))))[0] == 0.0f);

    Rng rng(91);
    Tensor lr = dv::randn<float>(rng, {3, 3});
    Tensor lf = dv::randn<float>(rng, {3, 3});
    double dl = 0.0, gl = 0.0;
    for (int64_t i = 0; i < 9; ++i) {
        dl += std::max(0.0, 1.0 - (double)lr[i]) + std::max(0.0, 1.0 + (double)lf[i]);
        gl -= (double)lf[i];
    }
    dl /= 9.0;
    gl /= 9.0;
    CHECK(std::abs((double)g.val(dv::hinge_d_loss(g, g.input(lr), g.input(lf)))[0] - dl) <
          1e-6 * std::abs(dl));
    CHECK(std::abs((double)g.val(dv::hinge_g_loss(g, g.input(lf)))[0] - gl) <
          1e-6 * std::abs(gl));
}

TEST_CASE("discriminator emits a patch logit grid") {
    dv::Discriminator disc;
    disc.init(9, 2);
    Rng rng(101);
    Tensor v = dv::randn<float>(rng, {5, 16, 16, 3});
    Tensor logits = dv::run_layers_plain(disc.ps, disc.layers, v);
    CHECK(logits.shape == std::vector<int64_t>({2, 2, 2, 1}));
}

TEST_CASE("discriminator hinge loss gradient matches central differences") {
    dv::Discriminator disc;
    disc.init(10, 2);
    Rng rng(111);
    // modest input scale keeps every logit far from the hinge kinks at +-1,
    // where a finite-difference probe would straddle the non-smooth point
    Tensor real = dv::randn<float>(rng, {5, 8, 8, 3}, 0.3);
    Tensor fake = dv::randn<float>(rng, {5, 8, 8, 3}, 0.3);
    for (const Tensor& v : {real, fake}) {
        Tensor logits = dv::run_layers_plain(disc.ps, disc.layers, v);
        for (int64_t i = 0; i < logits.numel(); ++i) REQUIRE(std::abs(logits[i]) < 0.9f);
    }

    std::vector<std::pair<std::string, Tensor64>> params;
    for (const auto& e : disc.ps.entries) params.push_back({e.name, e.value.cast<double>()});
    auto rep = dv::grad_check(
        params,
        [&](Graph64& g, const std::vector<int>& ids) {
            dv::BoundParams P{&disc.ps, ids};
            int lr = dv::run_layers_graph(g, P, disc.layers, g.input(real.cast<double>()));
            int lf = dv::run_layers_graph(g, P, disc.layers, g.input(fake.cast<double>()));
            return dv::hinge_d_loss(g, lr, lf);
        },
        1e-5, 3);
    CHECK(rep.checked > 400);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("full vae objective (gan off) gradient matches central differences") {
    VaeModel m = toy_model(12);
    // nudge every parameter off the init point (zero residual tails, unit
    // norm scales) so no gradient path is degenerate for the check
    Rng nr(122);
    for (auto& e : m.ps.entries)
        for (int64_t i = 0; i < e.value.numel(); ++i) e.value[i] += (float)(nr.normal() * 0.05);
    dv::Perceptual pc;
    pc.init(7);
    Rng rng(121);
    Tensor video = dv::randn<float>(rng, {5, 8, 8, 3});
    Tensor eps = dv::randn<float>(rng, {2, 1, 1, 2});

    std::vector<std::pair<std::string, Tensor64>> params;
    for (const auto& e : m.ps.entries) params.push_back({e.name, e.value.cast<double>()});
    auto rep = dv::grad_check(
        params,
        [&](Graph64& g, const std::vector<int>& ids) {
            dv::BoundParams P{&m.ps, ids};
            auto PP = dv::bind_frozen(g, pc.ps);
            int v = g.input(video.cast<double>());
            auto n = dv::vae_loss_graph(g, m, P, pc, PP, nullptr, nullptr, v, eps, 0);
            return n.total;
        },
        // the deep composite loss needs a wider probe: at 1e-5 the secant is
        // dominated by accumulation roundoff, at 1e-4 it has converged
        1e-4, 29);
    CHECK(rep.checked > 300);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
}
