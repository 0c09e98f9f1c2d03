#ifndef DV_VERIFY_HPP
#define DV_VERIFY_HPP

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "ctxpar.hpp"
#include "checkpoint.hpp"
#include "diffusion.hpp"
#include "dit.hpp"
#include "framepack.hpp"
#include "gradcheck.hpp"
#include "synthdata.hpp"
#include "trainer.hpp"
#include "vae.hpp"

// Fast self-contained re-statements of the repository's core invariants,
// runnable from a fresh checkout via `deskvid verify`. Each check throws on
// violation; the registry prints one PASS/FAIL line per invariant id. These
// are condensed versions of the unit tests, small enough to run in seconds,
// and they share no state so a fault injected through test_hooks flips only
// the checks that actually depend on the broken property.

namespace dv {

struct InvariantCheck {
    std::string id;
    std::string what;
    std::function<void()> run;
};

namespace verify_detail {

inline void expect(bool ok, const std::string& msg) { check(ok, msg); }

inline VaeModel toy_vae(uint64_t seed) {
    VaeModel m;
    m.cfg.base_channels = 2;
    m.cfg.latent_channels = 2;
    m.cfg.blocks_per_stage = 1;
    m.cfg.stage_multipliers = {1, 2, 2, 2};
    m.init(seed);
    return m;
}

inline DitConfig tiny_dit_cfg() {
    DitConfig cfg;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.patch = 2;
    cfg.latent_channels = 4;
    cfg.vocab = 24;
    cfg.t_emb_dim = 32;
    cfg.grid_t = 5;
    cfg.grid_y = 2;
    cfg.grid_x = 2;
    return cfg;
}

inline bool frames_equal(const Tensor& a, const Tensor& b, int64_t t0, int64_t t1) {
    const int64_t stride = a.numel() / a.shape[0];
    for (int64_t t = t0; t < t1; ++t)
        for (int64_t i = 0; i < stride; ++i)
            if (a[t * stride + i] != b[t * stride + i]) return false;
    return true;
}

// attention logit between two tokens whose head vectors are rotated by the
// coordinate angles, the quantity 3D rope keeps shift-invariant
inline double rope_logit(const RopeTable& tab, const std::array<int64_t, 3>& ca,
                         const std::array<int64_t, 3>& cb, const std::vector<double>& q,
                         const std::vector<double>& k) {
    Tensor cos_t, sin_t;
    rope_angles(tab, {ca, cb}, {1, 1}, 1.0, 1.0, 1.0, &cos_t, &sin_t);
    const size_t half = q.size() / 2;
    std::vector<double> qr(q.size()), kr(k.size());
    for (size_t j = 0; j < half; ++j) {
        qr[2 * j] = q[2 * j] * cos_t.at2(0, (int64_t)j) - q[2 * j + 1] * sin_t.at2(0, (int64_t)j);
        qr[2 * j + 1] =
            q[2 * j] * sin_t.at2(0, (int64_t)j) + q[2 * j + 1] * cos_t.at2(0, (int64_t)j);
        kr[2 * j] = k[2 * j] * cos_t.at2(1, (int64_t)j) - k[2 * j + 1] * sin_t.at2(1, (int64_t)j);
        kr[2 * j + 1] =
            k[2 * j] * sin_t.at2(1, (int64_t)j) + k[2 * j + 1] * cos_t.at2(1, (int64_t)j);
    }
    double dot = 0;
    for (size_t j = 0; j < q.size(); ++j) dot += qr[j] * kr[j];
    return dot;
}

}  // namespace verify_detail

inline std::vector<InvariantCheck> invariant_suite() {
    using namespace verify_detail;
    std::vector<InvariantCheck> suite;

    suite.push_back({"NUM-GRAD", "autodiff gradients agree with finite differences", [] {
        Rng rng(5);
        std::vector<std::pair<std::string, Tensor64>> params = {
            {"w", randn<double>(rng, {6, 4}, 0.5)}, {"b", randn<double>(rng, {4}, 0.5)}};
        Tensor64 x = randn<double>(rng, {3, 6}, 1.0);
        Tensor64 y = randn<double>(rng, {3, 4}, 1.0);
        auto r = grad_check(params, [&](Graph64& g, const std::vector<int>& ids) {
            return g.mse(g.silu(g.linear(g.input(x), ids[0], ids[1])), g.input(y));
        });
        expect(r.max_rel_err < 1e-4, "gradcheck rel error " + std::to_string(r.max_rel_err));
    }});

    suite.push_back({"VAE-SHAPE", "encode compresses 4x temporal and 8x8 spatial", [] {
        VaeModel m = toy_vae(1);
        for (int64_t T : {1LL, 5LL, 17LL}) {
            auto d = vae_encode(m, Tensor({T, 16, 16, 3}));
            expect(d.mean.shape == std::vector<int64_t>{1 + (T - 1) / 4, 2, 2, 2},
                   "latent shape wrong for T=" + std::to_string(T));
        }
    }});

    suite.push_back({"VAE-CAUSAL-ENC", "future frames never touch past latents", [] {
        VaeModel m = toy_vae(2);
        Rng rng(3);
        Tensor video = randn<float>(rng, {9, 16, 16, 3}, 0.5);
        Tensor poked = video;
        for (int64_t i = 0; i < poked.numel() / 9; ++i) poked[8 * (poked.numel() / 9) + i] += 1.0f;
        Tensor a = vae_encode(m, video).mean;
        Tensor b = vae_encode(m, poked).mean;
        expect(frames_equal(a, b, 0, 2), "past latents changed");
        expect(!frames_equal(a, b, 2, 3), "perturbation had no effect at all");
    }});

    suite.push_back({"VAE-CAUSAL-DEC", "future latents never touch past output frames", [] {
        VaeModel m = toy_vae(2);
        Rng rng(4);
        Tensor lat = randn<float>(rng, {3, 2, 2, 2}, 0.5);
        Tensor poked = lat;
        for (int64_t i = 0; i < poked.numel() / 3; ++i) poked[2 * (poked.numel() / 3) + i] += 1.0f;
        Tensor a = vae_decode(m, lat);
        Tensor b = vae_decode(m, poked);
        expect(frames_equal(a, b, 0, 5), "past output frames changed");
        expect(!frames_equal(a, b, 5, 6), "perturbation had no effect at all");
    }});

    suite.push_back({"VAE-IMAGE-FRAME0", "first latent frame equals the first-frame image encode", [] {
        VaeModel m = toy_vae(5);
        Rng rng(6);
        Tensor video = randn<float>(rng, {5, 16, 16, 3}, 0.5);
        Tensor frame0({1, 16, 16, 3});
        std::copy(video.ptr(), video.ptr() + frame0.numel(), frame0.ptr());
        Tensor full = vae_encode(m, video).mean;
        Tensor solo = vae_encode(m, frame0).mean;
        expect(frames_equal(full, solo, 0, 1), "clip and image encodings of frame 0 differ");
    }});

    suite.push_back({"CTX-EQUIV", "context-parallel encoder matches serial bitwise", [] {
        VaeModel m = toy_vae(7);
        Rng rng(8);
        Tensor video = randn<float>(rng, {17, 16, 16, 3}, 0.5);
        Tensor serial = run_layers_plain(m.ps, m.enc, video);
        for (int ranks : {2, 4}) {
            auto run = run_layers_parallel(m.ps, m.enc, video, ranks, false);
            expect(max_abs_diff(serial, run.output) == 0.0,
                   "rank " + std::to_string(ranks) + " output differs");
            expect(run.halos.size() == (size_t)((ranks - 1) * 13), "unexpected message count");
            for (const auto& h : run.halos)
                expect(h.frames == 2 && h.to_rank == h.from_rank + 1, "bad halo message");
        }
    }});

    suite.push_back({"CTX-COMM", "halo traffic matches the closed-form count", [] {
        ParamStore ps;
        Rng rng(9);
        LayerBuilder b{ps, rng, {}};
        b.conv("c", 3, 16, 8, 1, 1);
        auto rep = comm_report(b.layers, 17, 32, 32, 16, 2);
        expect(rep.halo_elements == 32768, "expected 32768 halo elements");
    }});

    suite.push_back({"DIT-ROPE-REL", "attention logits depend only on coordinate deltas", [] {
        RopeTable tab = make_rope_table(16, 8, 8, 8);
        Rng rng(10);
        std::vector<double> q(16), k(16);
        for (auto& v : q) v = rng.normal();
        for (auto& v : k) v = rng.normal();
        const double base = rope_logit(tab, {1, 2, 3}, {3, 1, 2}, q, k);
        const double shifted = rope_logit(tab, {3, 4, 5}, {5, 3, 4}, q, k);
        expect(std::abs(base - shifted) < 1e-5, "logit changed under a coordinate shift");
    }});

    suite.push_back({"DIT-ROPE-SPLIT", "head channels split 3/8 x, 3/8 y, 2/8 t", [] {
        RopeTable tab = make_rope_table(16, 4, 4, 4);
        expect(tab.dx == 6 && tab.dy == 6 && tab.dt == 4, "channel split wrong for dh=16");
    }});

    suite.push_back({"DIT-ADALN-IDENTITY", "zero gates make the block stack an identity", [] {
        DitConfig cfg = tiny_dit_cfg();
        ParamStore ps;
        Rng rng(11);
        init_dit(ps, cfg, rng);
        RopeTable rope = make_rope_table(cfg.head_dim(), cfg.grid_t, cfg.grid_y, cfg.grid_x);
        DitExample ex;
        ex.text_ids = {1, 3, 9, 12};
        Rng zr(12);
        ex.z = randn<float>(zr, {2, 4, 4, cfg.latent_channels}, 0.5);
        ex.t = 7;
        Graph g;
        BoundParams P = bind_named(g, ps);
        auto f = dit_forward(g, P, cfg, rope, {ex});
        expect(max_abs_diff(g.val(f.tokens_in), g.val(f.tokens_out)) == 0.0,
               "block stack moved the residual stream at init");
    }});

    suite.push_back({"DIT-PACK-EQUIV", "packed forward equals standalone forwards", [] {
        DitConfig cfg = tiny_dit_cfg();
        ParamStore ps;
        Rng rng(13);
        init_dit(ps, cfg, rng);
        for (auto& e : ps.entries)
            for (int64_t i = 0; i < e.value.numel(); ++i)
                e.value[i] += (float)(0.02 * rng.normal());
        RopeTable rope = make_rope_table(cfg.head_dim(), cfg.grid_t, cfg.grid_y, cfg.grid_x);
        Rng zr(14);
        std::vector<DitExample> exs(2);
        exs[0] = {{1, 4, 10, 13}, randn<float>(zr, {2, 4, 4, cfg.latent_channels}, 0.5), 11};
        exs[1] = {{1, 5, 9, 14}, randn<float>(zr, {1, 4, 4, cfg.latent_channels}, 0.5), 500};
        Graph g;
        BoundParams P = bind_named(g, ps);
        auto packed = dit_forward(g, P, cfg, rope, exs);
        for (size_t e = 0; e < exs.size(); ++e) {
            Graph gs;
            BoundParams Ps = bind_named(gs, ps);
            auto solo = dit_forward(gs, Ps, cfg, rope, {exs[e]});
            expect(max_abs_diff(g.val(packed.v[e]), gs.val(solo.v[0])) <= 1e-6,
                   "packed output differs from standalone");
        }
    }});

    suite.push_back({"DIF-TERMINAL-SNR", "terminal signal rate is exactly zero", [] {
        NoiseSchedule ns = build_schedule(1000);
        expect(ns.a[1000] == 0.0, "a_T not zero");
        for (int64_t t = 1; t <= 1000; ++t)
            expect(std::abs(ns.a[t] * ns.a[t] + ns.s[t] * ns.s[t] - 1.0) < 1e-6,
                   "a^2+s^2 drifted at t=" + std::to_string(t));
    }});

    suite.push_back({"DIF-V-IDENTITY", "v-parameterization identities hold", [] {
        NoiseSchedule ns = build_schedule(1000);
        Rng rng(15);
        Tensor x0 = randn<float>(rng, {2, 3, 3, 2}, 1.0);
        Tensor eps = randn<float>(rng, {2, 3, 3, 2}, 1.0);
        for (int64_t t : {1LL, 357LL, 1000LL}) {
            Tensor z = noisy_latent(x0, eps, ns, t);
            Tensor v = v_target(x0, eps, ns, t);
            expect(max_abs_diff(recover_x0(z, v, ns, t), x0) < 1e-5, "x0 identity failed");
            expect(max_abs_diff(recover_eps(z, v, ns, t), eps) < 1e-5, "eps identity failed");
        }
    }});

    suite.push_back({"DIF-STRATA", "rank timesteps cover every stratum exactly once", [] {
        const int64_t T = 1000, n = 8;
        Rng rng(16);
        for (int rep = 0; rep < 20; ++rep)
            for (int64_t r = 0; r < n; ++r) {
                const int64_t t = sample_timestep(T, n, r, rng);
                const auto range = stratum_range(T, n, r);
                expect(t >= range.lo && t <= range.hi, "sample escaped its stratum");
            }
        expect(stratum_range(T, n, 0).lo == 1 && stratum_range(T, n, n - 1).hi == T,
               "strata do not tile [1,T]");
    }});

    suite.push_back({"DIF-DDIM-ORACLE", "ddim recovers a known x0 through the v oracle", [] {
        NoiseSchedule ns = build_schedule(200);
        Rng rng(17);
        Tensor x0 = randn<float>(rng, {2, 4, 4, 2}, 1.0);
        auto vhat = [&](const Tensor& z, int64_t t) {
            return mix(z, x0, ns.a[(size_t)t] / ns.s[(size_t)t], -1.0 / ns.s[(size_t)t]);
        };
        Tensor z = randn<float>(rng, x0.shape, 1.0);
        for (int64_t steps : {1LL, 10LL, 50LL, 200LL}) {
            Tensor got = ddim_sample(ns, vhat, z, steps);
            expect(max_abs_diff(got, x0) < 1e-4, "ddim drifted from the oracle x0");
        }
    }});

    suite.push_back({"PACK-FFD", "first-fit-decreasing pack matches the hand answer", [] {
        std::vector<PackExample> ex(4);
        ex[0] = {4, 2, 2, 2};   // 12 tokens
        ex[1] = {4, 5, 1, 1};   // 9
        ex[2] = {4, 1, 2, 2};   // 8
        ex[3] = {1, 4, 1, 1};   // 5
        auto b = pack(ex, 20);
        expect(b.rows.size() == 2 && b.waste == 6, "pack layout changed");
        expect(b.rows[0].order == std::vector<int64_t>{0, 2} &&
                   b.rows[1].order == std::vector<int64_t>{1, 3},
               "pack row assignment changed");
    }});

    suite.push_back({"PACK-MASK", "attention mask is block-diagonal over examples", [] {
        Tensor mask = build_mask({0, 0, 1, 1, -1});
        for (int64_t i = 0; i < 5; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                const bool same = (i < 2 && j < 2) || (i >= 2 && i < 4 && j >= 2 && j < 4);
                expect(same ? mask.at2(i, j) == 0.0f
                            : std::isinf(mask.at2(i, j)) && mask.at2(i, j) < 0,
                       "mask wrong at " + std::to_string(i) + "," + std::to_string(j));
            }
    }});

    suite.push_back({"HARN-CKPT-ROUNDTRIP", "checkpoint round trip is bit-identical", [] {
        Checkpoint ck;
        Rng rng(18);
        ck.put("a", randn<float>(rng, {3, 4}, 1.0));
        ck.put("b", randn<float>(rng, {7}, 1.0));
        std::string buf = serialize_checkpoint(ck);
        Checkpoint back = deserialize_checkpoint(buf);
        expect(max_abs_diff(ck.at("a"), back.at("a")) == 0.0, "tensor a changed");
        expect(max_abs_diff(ck.at("b"), back.at("b")) == 0.0, "tensor b changed");
        buf[20] = (char)(buf[20] ^ 0x40);
        bool rejected = false;
        try {
            deserialize_checkpoint(buf);
        } catch (const std::exception&) {
            rejected = true;
        }
        expect(rejected, "corrupted checkpoint accepted");
    }});

    suite.push_back({"HARN-DATA-DETERMINISM", "clips regenerate bit-identically", [] {
        SynthSpec spec;
        spec.num_clips = 4;
        Clip a = make_clip(spec, 3);
        Clip b = make_clip(spec, 3);
        expect(max_abs_diff(a.video, b.video) == 0.0 && a.caption == b.caption,
               "clip 3 not reproducible");
        expect(a.caption.size() == 4 && a.caption[0] == kBosToken, "caption layout wrong");
    }});

    return suite;
}

struct VerifyReport {
    int passed = 0, failed = 0;
    std::vector<std::string> lines;
};

inline VerifyReport run_invariants(bool print = true) {
    VerifyReport rep;
    for (const auto& inv : invariant_suite()) {
        std::string line;
        try {
            inv.run();
            line = "PASS " + inv.id + ": " + inv.what;
            ++rep.passed;
        } catch (const std::exception& e) {
            line = "FAIL " + inv.id + ": " + inv.what + " (" + e.what() + ")";
            ++rep.failed;
        }
        if (print) std::printf("%s\n", line.c_str());
        rep.lines.push_back(std::move(line));
    }
    if (print) std::printf("%d passed, %d failed\n", rep.passed, rep.failed);
    return rep;
}

}  // namespace dv

#endif  // DV_VERIFY_HPP
