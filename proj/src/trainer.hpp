#ifndef DV_TRAINER_HPP
#define DV_TRAINER_HPP

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "diffusion.hpp"
#include "dit.hpp"
#include "framepack.hpp"
#include "synthdata.hpp"
#include "vae.hpp"

// Training orchestration: the VAE loop (staged frame counts, adversarial
// term after a warmup), latent encoding of the dataset, the v-prediction
// transformer loop (stratified timesteps, packed batches, caption dropout),
// progressive-resolution stages, ablation pairs, and exact checkpoint resume.

namespace dv {

// ---------------------------------------------------------------------------
// VAE training

struct VaeStepRow {
    int64_t step = 0;
    double loss = 0, l2 = 0, perc = 0, kl = 0, gan = 0;
};

inline Tensor crop_frames(const Tensor& video, int64_t frames_cap) {
    const int64_t T = std::min(video.shape[0], frames_cap);
    Tensor out({T, video.shape[1], video.shape[2], video.shape[3]});
    std::copy(video.ptr(), video.ptr() + out.numel(), out.ptr());
    return out;
}

struct VaeTrainer {
    VaeModel model;
    Perceptual perc;
    Discriminator disc;
    Adam opt, opt_disc;
    Rng data_rng{0}, eps_rng{0};
    int64_t step = 0;
    int64_t frames_cap = 5;
    double initial_loss = -1.0;
    int64_t diverged_run = 0;

    void init(const VaeConfig& cfg, uint64_t seed, double lr = 1e-3) {
        model.cfg = cfg;
        model.init(Rng::hash_stream(seed, 1));
        perc.init(Rng::hash_stream(seed, 2));
        disc.init(Rng::hash_stream(seed, 3), cfg.base_channels);
        data_rng = Rng(Rng::hash_stream(seed, 4));
        eps_rng = Rng(Rng::hash_stream(seed, 5));
        opt = Adam{};
        opt_disc = Adam{};
        opt.lr = lr;
        opt_disc.lr = lr;
    }

    VaeStepRow step_once(const std::vector<Clip>& clips) {
        check(!clips.empty(), "train: empty dataset");
        const Clip& clip = clips[(size_t)data_rng.uniform_int(0, (int64_t)clips.size() - 1)];
        Tensor video = crop_frames(clip.video, frames_cap);
        Tensor eps = randn<float>(eps_rng, vae_latent_shape(model.cfg, video.shape));

        const bool gan_on = step >= model.cfg.gan_warmup_steps;
        Graph g;
        BoundParams P = bind_named(g, model.ps);
        BoundParams PP = bind_frozen(g, perc.ps);
        BoundParams PD;
        if (gan_on) PD = bind_frozen(g, disc.ps);
        int vid = g.input(video);
        VaeLossNodes nodes = vae_loss_graph(g, model, P, perc, PP, gan_on ? &disc : nullptr,
                                            gan_on ? &PD : nullptr, vid, eps, step);
        g.backward(nodes.total);
        opt.step(model.ps, g, P.ids);

        VaeStepRow row;
        row.step = step + 1;
        row.loss = g.val(nodes.total)[0];
        row.l2 = g.val(nodes.l2)[0];
        row.perc = g.val(nodes.perc)[0];
        row.kl = g.val(nodes.kl)[0];
        row.gan = nodes.gan >= 0 ? g.val(nodes.gan)[0] : 0.0;

        if (gan_on) {
            // discriminator sees the reconstruction as a constant
            Tensor recon = g.val(nodes.recon);
            Graph gd;
            BoundParams PDd = bind_named(gd, disc.ps);
            int real = run_layers_graph(gd, PDd, disc.layers, gd.input(video));
            int fake = run_layers_graph(gd, PDd, disc.layers, gd.input(recon));
            int dl = hinge_d_loss(gd, real, fake);
            gd.backward(dl);
            opt_disc.step(disc.ps, gd, PDd.ids);
        }

        ++step;
        if (initial_loss < 0) initial_loss = row.loss;
        diverged_run = row.loss > 10.0 * initial_loss ? diverged_run + 1 : 0;
        check(diverged_run < 100, "train: vae loss diverged (100 steps above 10x initial)");
        return row;
    }
};

// Deterministic reconstruction quality on a fixed clip subset: encode to the
// posterior mean, decode, mean squared error. Used to judge training
// progress without per-step sampling noise.
inline double eval_recon_l2(const VaeModel& m, const std::vector<Clip>& clips,
                            int64_t frames_cap, size_t max_clips = 8) {
    double total = 0;
    const size_t n = std::min(max_clips, clips.size());
    check(n > 0, "eval: empty dataset");
    for (size_t i = 0; i < n; ++i) {
        Tensor video = crop_frames(clips[i].video, frames_cap);
        Tensor recon = vae_decode(m, vae_encode(m, video).mean);
        double acc = 0;
        for (int64_t j = 0; j < video.numel(); ++j) {
            const double d = (double)recon[j] - (double)video[j];
            acc += d * d;
        }
        total += acc / (double)video.numel();
    }
    return total / (double)n;
}

inline Checkpoint vae_trainer_checkpoint(const VaeTrainer& tr) {
    Checkpoint ck;
    params_to_checkpoint(ck, tr.model.ps, "vae/");
    params_to_checkpoint(ck, tr.disc.ps, "disc/");
    params_to_checkpoint(ck, tr.perc.ps, "perc/");
    const auto& c = tr.model.cfg;
    ck.put("meta/vae_cfg",
           u64s_to_tensor({(uint64_t)c.base_channels, (uint64_t)c.latent_channels,
                           (uint64_t)c.temporal_kernel, (uint64_t)c.blocks_per_stage,
                           (uint64_t)c.stage_multipliers[0], (uint64_t)c.stage_multipliers[1],
                           (uint64_t)c.stage_multipliers[2], (uint64_t)c.stage_multipliers[3],
                           (uint64_t)c.gan_warmup_steps}));
    ck.put("meta/vae_state",
           u64s_to_tensor({(uint64_t)tr.step, tr.data_rng.state(), tr.eps_rng.state(),
                           (uint64_t)tr.opt.t, (uint64_t)tr.opt_disc.t,
                           std::bit_cast<uint64_t>(tr.initial_loss), (uint64_t)tr.diverged_run,
                           (uint64_t)tr.frames_cap, std::bit_cast<uint64_t>(tr.opt.lr),
                           std::bit_cast<uint64_t>(tr.opt_disc.lr)}));
    return ck;
}

inline VaeConfig vae_cfg_from_checkpoint(const Checkpoint& ck) {
    const auto v = tensor_to_u64s(ck.at("meta/vae_cfg"));
    VaeConfig c;
    c.base_channels = (int64_t)v[0];
    c.latent_channels = (int64_t)v[1];
    c.temporal_kernel = (int64_t)v[2];
    c.blocks_per_stage = (int64_t)v[3];
    c.stage_multipliers = {(int64_t)v[4], (int64_t)v[5], (int64_t)v[6], (int64_t)v[7]};
    c.gan_warmup_steps = (int64_t)v[8];
    return c;
}

inline void vae_trainer_restore(VaeTrainer& tr, const Checkpoint& ck) {
    const VaeConfig stored = vae_cfg_from_checkpoint(ck);
    check(stored.base_channels == tr.model.cfg.base_channels &&
              stored.latent_channels == tr.model.cfg.latent_channels &&
              stored.blocks_per_stage == tr.model.cfg.blocks_per_stage,
          "checkpoint: vae config mismatch");
    params_from_checkpoint(ck, tr.model.ps, "vae/");
    params_from_checkpoint(ck, tr.disc.ps, "disc/");
    params_from_checkpoint(ck, tr.perc.ps, "perc/");
    const auto s = tensor_to_u64s(ck.at("meta/vae_state"));
    tr.step = (int64_t)s[0];
    tr.data_rng.set_state(s[1]);
    tr.eps_rng.set_state(s[2]);
    tr.opt.t = (int64_t)s[3];
    tr.opt_disc.t = (int64_t)s[4];
    tr.initial_loss = std::bit_cast<double>(s[5]);
    tr.diverged_run = (int64_t)s[6];
    tr.frames_cap = (int64_t)s[7];
    tr.opt.lr = std::bit_cast<double>(s[8]);
    tr.opt_disc.lr = std::bit_cast<double>(s[9]);
}

// ---------------------------------------------------------------------------
// Latent dataset for transformer training

struct LatentClip {
    Tensor z0;  // posterior mean / latent_scale
    std::vector<int64_t> caption;
    float noise_level = 0;
};

struct EncodedDataset {
    std::vector<LatentClip> clips;
    double latent_scale = 1.0;
};

inline EncodedDataset encode_dataset(const VaeModel& m, const std::vector<Clip>& clips) {
    EncodedDataset out;
    out.clips.reserve(clips.size());
    double sq = 0;
    int64_t count = 0;
    for (const Clip& c : clips) {
        LatentClip lc;
        lc.z0 = vae_encode(m, c.video).mean;
        lc.caption = c.caption;
        lc.noise_level = c.noise_level;
        for (int64_t i = 0; i < lc.z0.numel(); ++i) sq += (double)lc.z0[i] * (double)lc.z0[i];
        count += lc.z0.numel();
        out.clips.push_back(std::move(lc));
    }
    out.latent_scale = std::sqrt(std::max(sq / (double)std::max<int64_t>(count, 1), 1e-12));
    for (auto& lc : out.clips)
        for (int64_t i = 0; i < lc.z0.numel(); ++i)
            lc.z0[i] = (float)((double)lc.z0[i] / out.latent_scale);
    return out;
}

// ---------------------------------------------------------------------------
// Transformer training

struct DitTrainOpts {
    int64_t n_ranks = 4;  // examples per step, one timestep stratum each
    int64_t pack_tokens = 64;
    double lr = 3e-4;
    double caption_dropout = 0.1;
    bool explicit_sampling = true;
    int64_t t_diff = 1000;
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.shape[0] == b.shape[0] && a.shape[1] == b.shape[1] && a.shape[2] == b.shape[2],
          "i2v: channel concat shape mismatch");
    Tensor out({a.shape[0], a.shape[1], a.shape[2], a.shape[3] + b.shape[3]});
    const int64_t rows = a.numel() / a.shape[3];
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(a.ptr() + r * a.shape[3], a.ptr() + (r + 1) * a.shape[3],
                  out.ptr() + r * out.shape[3]);
        std::copy(b.ptr() + r * b.shape[3], b.ptr() + (r + 1) * b.shape[3],
                  out.ptr() + r * out.shape[3] + a.shape[3]);
    }
    return out;
}

struct DitTrainer {
    DitConfig cfg;
    DitTrainOpts opts;
    ParamStore ps;
    RopeTable rope;
    NoiseSchedule ns;
    Adam opt;
    Rng data_rng{0};
    std::vector<Rng> rank_rngs;
    int64_t step = 0;
    double latent_scale = 1.0;
    double scale_t = 1.0, scale_y = 1.0, scale_x = 1.0;  // rope coordinate rescaling

    void init(const DitConfig& c, const DitTrainOpts& o, uint64_t seed) {
        cfg = c;
        opts = o;
        ps = ParamStore{};
        Rng ir(Rng::hash_stream(seed, 21));
        init_dit(ps, cfg, ir);
        rope = make_rope_table(cfg.head_dim(), cfg.grid_t, cfg.grid_y, cfg.grid_x);
        ns = build_schedule(opts.t_diff);
        data_rng = Rng(Rng::hash_stream(seed, 22));
        rank_rngs.clear();
        for (int64_t r = 0; r < opts.n_ranks; ++r)
            rank_rngs.emplace_back(Rng::hash_stream(seed, 1000 + (uint64_t)r));
        opt = Adam{};
        opt.lr = o.lr;
    }

    // grows the rope grid (extrapolation keeps every old coordinate's angles)
    void set_grid(int64_t grid_t, int64_t grid_y, int64_t grid_x, bool interpolate) {
        if (interpolate) {
            scale_t *= (double)cfg.grid_t / (double)grid_t;
            scale_y *= (double)cfg.grid_y / (double)grid_y;
            scale_x *= (double)cfg.grid_x / (double)grid_x;
        }
        cfg.grid_t = grid_t;
        cfg.grid_y = grid_y;
        cfg.grid_x = grid_x;
        rope = make_rope_table(cfg.head_dim(), grid_t, grid_y, grid_x);
    }

    struct Batch {
        std::vector<DitExample> examples;
        std::vector<Tensor> targets;
        PackedBatch packed;
    };

    Batch draw_batch(const EncodedDataset& data) {
        check(!data.clips.empty(), "train: empty dataset");
        const int64_t n = opts.n_ranks;
        Batch b;
        std::vector<PackExample> pe((size_t)n);
        for (int64_t r = 0; r < n; ++r) {
            const LatentClip& clip =
                data.clips[(size_t)data_rng.uniform_int(0, (int64_t)data.clips.size() - 1)];
            const int64_t t = opts.explicit_sampling
                                  ? sample_timestep(ns.T, n, r, rank_rngs[(size_t)r])
                                  : rank_rngs[(size_t)r].uniform_int(1, ns.T);
            Tensor eps = randn<float>(data_rng, clip.z0.shape);
            DitExample ex;
            ex.t = t;
            ex.text_ids = clip.caption;
            if (data_rng.uniform() < opts.caption_dropout)
                ex.text_ids = {kBosToken, kNullToken, kNullToken, kNullToken};
            Tensor z_t = noisy_latent(clip.z0, eps, ns, t);
            if (cfg.in_channel_mult == 2) {
                // image-to-video: first latent frame rides along as a
                // condition, corrupted so it cannot be copied verbatim
                Tensor frame0({1, clip.z0.shape[1], clip.z0.shape[2], clip.z0.shape[3]});
                std::copy(clip.z0.ptr(), clip.z0.ptr() + frame0.numel(), frame0.ptr());
                Tensor cond = make_i2v_condition(frame0, clip.z0.shape[0]);
                cond = corrupt_i2v_condition(cond, ns, data_rng);
                z_t = concat_channels(z_t, cond);
            }
            ex.z = std::move(z_t);
            b.examples.push_back(std::move(ex));
            b.targets.push_back(v_target(clip.z0, eps, ns, t));
            pe[(size_t)r] = {(int64_t)b.examples.back().text_ids.size(), clip.z0.shape[0],
                             clip.z0.shape[1] / cfg.patch, clip.z0.shape[2] / cfg.patch};
        }
        b.packed = pack(pe, opts.pack_tokens);
        return b;
    }

    // builds the packed loss; examples in the same row share one forward pass
    int batch_loss(Graph& g, const BoundParams& P, const Batch& b) {
        int total = -1;
        int64_t count = 0;
        for (const PackedRow& row : b.packed.rows) {
            std::vector<DitExample> rex;
            std::vector<Tensor> rvt;
            for (int64_t ei : row.order) {
                rex.push_back(b.examples[(size_t)ei]);
                rvt.push_back(b.targets[(size_t)ei]);
            }
            auto f = dit_forward(g, P, cfg, rope, rex, scale_t, scale_y, scale_x);
            int l = g.scale(dit_v_loss(g, f, rvt), (double)rex.size());
            total = total < 0 ? l : g.add(total, l);
            count += (int64_t)rex.size();
        }
        return g.scale(total, 1.0 / (double)count);
    }

    double step_once(const EncodedDataset& data) {
        Batch b = draw_batch(data);
        Graph g;
        BoundParams P = bind_named(g, ps);
        int loss = batch_loss(g, P, b);
        g.backward(loss);
        opt.step(ps, g, P.ids);
        ++step;
        return g.val(loss)[0];
    }

    // loss on the next batch without touching weights or stream positions
    double eval_once(const EncodedDataset& data) {
        const uint64_t ds = data_rng.state();
        std::vector<uint64_t> rs;
        for (const Rng& r : rank_rngs) rs.push_back(r.state());
        Batch b = draw_batch(data);
        data_rng.set_state(ds);
        for (size_t i = 0; i < rank_rngs.size(); ++i) rank_rngs[i].set_state(rs[i]);
        Graph g;
        BoundParams P = bind_frozen(g, ps);
        return g.val(batch_loss(g, P, b))[0];
    }
};

inline Checkpoint dit_trainer_checkpoint(const DitTrainer& tr) {
    Checkpoint ck;
    params_to_checkpoint(ck, tr.ps, "dit/");
    const DitConfig& c = tr.cfg;
    ck.put("meta/dit_cfg",
           u64s_to_tensor({(uint64_t)c.d_model, (uint64_t)c.n_heads, (uint64_t)c.n_layers,
                           (uint64_t)c.patch, (uint64_t)c.latent_channels, (uint64_t)c.vocab,
                           (uint64_t)c.t_emb_dim, (uint64_t)c.mlp_ratio,
                           (uint64_t)c.expert_adaln, (uint64_t)c.expert_mlp,
                           (uint64_t)c.use_rope, (uint64_t)c.learnable_abs_pos,
                           (uint64_t)c.abs_pos_slots, (uint64_t)c.in_channel_mult,
                           (uint64_t)c.grid_t, (uint64_t)c.grid_y, (uint64_t)c.grid_x}));
    std::vector<uint64_t> st = {(uint64_t)tr.step,
                                tr.data_rng.state(),
                                (uint64_t)tr.opt.t,
                                std::bit_cast<uint64_t>(tr.latent_scale),
                                std::bit_cast<uint64_t>(tr.scale_t),
                                std::bit_cast<uint64_t>(tr.scale_y),
                                std::bit_cast<uint64_t>(tr.scale_x),
                                (uint64_t)tr.opts.n_ranks,
                                (uint64_t)tr.opts.pack_tokens,
                                std::bit_cast<uint64_t>(tr.opts.lr),
                                std::bit_cast<uint64_t>(tr.opts.caption_dropout),
                                (uint64_t)tr.opts.explicit_sampling,
                                (uint64_t)tr.opts.t_diff};
    for (const Rng& r : tr.rank_rngs) st.push_back(r.state());
    ck.put("meta/dit_state", u64s_to_tensor(st));
    return ck;
}

inline DitConfig dit_cfg_from_checkpoint(const Checkpoint& ck) {
    const auto v = tensor_to_u64s(ck.at("meta/dit_cfg"));
    check(v.size() == 17, "checkpoint: bad dit config record");
    DitConfig c;
    c.d_model = (int64_t)v[0];
    c.n_heads = (int64_t)v[1];
    c.n_layers = (int64_t)v[2];
    c.patch = (int64_t)v[3];
    c.latent_channels = (int64_t)v[4];
    c.vocab = (int64_t)v[5];
    c.t_emb_dim = (int64_t)v[6];
    c.mlp_ratio = (int64_t)v[7];
    c.expert_adaln = v[8] != 0;
    c.expert_mlp = v[9] != 0;
    c.use_rope = v[10] != 0;
    c.learnable_abs_pos = v[11] != 0;
    c.abs_pos_slots = (int64_t)v[12];
    c.in_channel_mult = (int64_t)v[13];
    c.grid_t = (int64_t)v[14];
    c.grid_y = (int64_t)v[15];
    c.grid_x = (int64_t)v[16];
    return c;
}

inline DitTrainer dit_trainer_from_checkpoint(const Checkpoint& ck) {
    DitTrainer tr;
    const auto st = tensor_to_u64s(ck.at("meta/dit_state"));
    check(st.size() >= 13, "checkpoint: bad dit state record");
    DitTrainOpts opts;
    opts.n_ranks = (int64_t)st[7];
    opts.pack_tokens = (int64_t)st[8];
    opts.lr = std::bit_cast<double>(st[9]);
    opts.caption_dropout = std::bit_cast<double>(st[10]);
    opts.explicit_sampling = st[11] != 0;
    opts.t_diff = (int64_t)st[12];
    tr.init(dit_cfg_from_checkpoint(ck), opts, 0);
    params_from_checkpoint(ck, tr.ps, "dit/");
    tr.step = (int64_t)st[0];
    tr.data_rng.set_state(st[1]);
    tr.opt.t = (int64_t)st[2];
    tr.latent_scale = std::bit_cast<double>(st[3]);
    tr.scale_t = std::bit_cast<double>(st[4]);
    tr.scale_y = std::bit_cast<double>(st[5]);
    tr.scale_x = std::bit_cast<double>(st[6]);
    check(st.size() == 13 + (size_t)opts.n_ranks, "checkpoint: bad dit rng record");
    for (size_t r = 0; r < (size_t)opts.n_ranks; ++r) tr.rank_rngs[r].set_state(st[13 + r]);
    return tr;
}

// ---------------------------------------------------------------------------
// Sampling

// ddim over the latent grid, then decode. The caption is the full
// conditioning signal; classifier-free guidance stays off by default.
inline Tensor sample_video(DitTrainer& tr, const VaeModel& vae,
                           const std::vector<int64_t>& caption, int64_t frames, int64_t size,
                           int64_t steps, uint64_t seed, Tensor* latent_out = nullptr) {
    check(frames >= 1 && (frames - 1) % 4 == 0, "sample: frames must be 1 mod 4");
    check(size % 8 == 0, "sample: size must be divisible by 8");
    const int64_t t_lat = 1 + (frames - 1) / 4;
    const int64_t hw = size / 8;
    check(hw % tr.cfg.patch == 0, "sample: latent grid not divisible by patch");
    if (t_lat > tr.cfg.grid_t || hw / tr.cfg.patch > tr.cfg.grid_y)
        tr.set_grid(std::max(t_lat, tr.cfg.grid_t), std::max(hw / tr.cfg.patch, tr.cfg.grid_y),
                    std::max(hw / tr.cfg.patch, tr.cfg.grid_x), false);

    Rng zr(Rng::hash_stream(seed, 31));
    Tensor z = randn<float>(zr, {t_lat, hw, hw, tr.cfg.latent_channels});
    auto vhat = [&](const Tensor& zt, int64_t t) {
        Graph g;
        BoundParams P = bind_frozen(g, tr.ps);
        DitExample ex;
        ex.text_ids = caption;
        ex.z = zt;
        ex.t = t;
        auto f = dit_forward(g, P, tr.cfg, tr.rope, {ex}, tr.scale_t, tr.scale_y, tr.scale_x);
        return g.val(f.v[0]);
    };
    Tensor x0 = ddim_sample(tr.ns, vhat, z, steps);
    for (int64_t i = 0; i < x0.numel(); ++i) x0[i] = (float)((double)x0[i] * tr.latent_scale);
    if (latent_out) *latent_out = x0;
    return vae_decode(vae, x0);
}

// widens the patch embedding for a second set of input channels, zero so the
// widened model computes exactly what the original did
inline void widen_patch_input(DitTrainer& tr) {
    check(tr.cfg.in_channel_mult == 1, "i2v: model already widened");
    const int64_t p = tr.cfg.patch, C = tr.cfg.latent_channels, d = tr.cfg.d_model;
    const Tensor& old_w = tr.ps.at("patch.w").value;
    Tensor neww({p * p * 2 * C, d});
    for (int64_t dy = 0; dy < p; ++dy)
        for (int64_t dx = 0; dx < p; ++dx)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t j = 0; j < d; ++j)
                    neww.at2(((dy * p) + dx) * 2 * C + c, j) =
                        old_w.at2(((dy * p) + dx) * C + c, j);
    auto& entry = tr.ps.at("patch.w");
    entry.value = neww;
    entry.m = Tensor(neww.shape);
    entry.v = Tensor(neww.shape);
    tr.cfg.in_channel_mult = 2;
}

inline Tensor sample_video_i2v(DitTrainer& tr, const VaeModel& vae, const Tensor& first_frame,
                               const std::vector<int64_t>& caption, int64_t frames,
                               int64_t size, int64_t steps, uint64_t seed) {
    check(tr.cfg.in_channel_mult == 2, "i2v: model lacks condition channels");
    const int64_t t_lat = 1 + (frames - 1) / 4;
    Tensor mean0 = vae_encode(vae, first_frame).mean;
    for (int64_t i = 0; i < mean0.numel(); ++i)
        mean0[i] = (float)((double)mean0[i] / tr.latent_scale);
    Tensor cond = make_i2v_condition(mean0, t_lat);

    Rng zr(Rng::hash_stream(seed, 31));
    Tensor z = randn<float>(zr, {t_lat, size / 8, size / 8, tr.cfg.latent_channels});
    auto vhat = [&](const Tensor& zt, int64_t t) {
        Graph g;
        BoundParams P = bind_frozen(g, tr.ps);
        DitExample ex;
        ex.text_ids = caption;
        ex.z = concat_channels(zt, cond);
        ex.t = t;
        auto f = dit_forward(g, P, tr.cfg, tr.rope, {ex}, tr.scale_t, tr.scale_y, tr.scale_x);
        return g.val(f.v[0]);
    };
    Tensor x0 = ddim_sample(tr.ns, vhat, z, steps);
    for (int64_t i = 0; i < x0.numel(); ++i) x0[i] = (float)((double)x0[i] * tr.latent_scale);
    return vae_decode(vae, x0);
}

// ---------------------------------------------------------------------------
// Progressive stages

struct StageSpec {
    std::string name = "stage";
    int64_t resolution = 32;
    std::vector<int64_t> frame_lengths = {1, 5, 9, 13, 17};
    int64_t num_clips = 128;
    int64_t steps = 100;
    double lr = 3e-4;
    double hq_fraction = 1.0;  // keep this fraction of clips, lowest noise first
};

// lowest-noise subset as the stand-in quality ranking
inline std::vector<Clip> hq_subset(std::vector<Clip> clips, double fraction) {
    check(fraction > 0.0 && fraction <= 1.0, "progressive: hq_fraction must be in (0,1]");
    std::stable_sort(clips.begin(), clips.end(),
                     [](const Clip& a, const Clip& b) { return a.noise_level < b.noise_level; });
    const size_t keep = std::max<size_t>(1, (size_t)((double)clips.size() * fraction + 0.5));
    clips.resize(std::min(keep, clips.size()));
    return clips;
}

struct StageResult {
    std::string name;
    std::vector<double> losses;
};

inline std::vector<StageResult> train_progressive(DitTrainer& tr, const VaeModel& vae,
                                                  const std::vector<StageSpec>& stages,
                                                  bool interpolate_rope, uint64_t data_seed) {
    std::vector<StageResult> results;
    for (const StageSpec& st : stages) {
        check(st.resolution % (8 * tr.cfg.patch) == 0,
              "progressive: resolution must be divisible by 8*patch");
        SynthSpec spec;
        spec.num_clips = st.num_clips;
        spec.frame_lengths = st.frame_lengths;
        spec.size = st.resolution;
        spec.seed = data_seed;
        std::vector<Clip> clips = make_clips(spec);
        if (st.hq_fraction < 1.0) clips = hq_subset(std::move(clips), st.hq_fraction);
        EncodedDataset data = encode_dataset(vae, clips);
        tr.latent_scale = data.latent_scale;

        const int64_t grid_hw = st.resolution / 8 / tr.cfg.patch;
        int64_t grid_t = 1;
        for (int64_t f : st.frame_lengths) grid_t = std::max(grid_t, 1 + (f - 1) / 4);
        if (grid_t > tr.cfg.grid_t || grid_hw > tr.cfg.grid_y || grid_hw > tr.cfg.grid_x)
            tr.set_grid(std::max(grid_t, tr.cfg.grid_t), std::max(grid_hw, tr.cfg.grid_y),
                        std::max(grid_hw, tr.cfg.grid_x), interpolate_rope);
        // rows must fit the largest single example of the stage
        tr.opts.pack_tokens =
            std::max(tr.opts.pack_tokens, 4 + grid_t * grid_hw * grid_hw);

        tr.opt.lr = st.lr;
        StageResult res;
        res.name = st.name;
        for (int64_t i = 0; i < st.steps; ++i) res.losses.push_back(tr.step_once(data));
        results.push_back(std::move(res));
    }
    return results;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationArm {
    std::string name;
    std::vector<std::vector<double>> losses;  // per seed
    int64_t param_count = 0;
    double mean_final = 0;     // mean loss over the final fifth of steps
    double mean_step_var = 0;  // variance of successive loss differences
};

struct AblationResult {
    std::string name;
    AblationArm a, b;
    std::string verdict;
};

namespace detail {

inline void arm_stats(AblationArm& arm) {
    double final_acc = 0, var_acc = 0;
    for (const auto& series : arm.losses) {
        if (series.empty()) continue;
        const size_t window = std::max<size_t>(1, series.size() / 5);
        double f = 0;
        for (size_t i = series.size() - window; i < series.size(); ++i) f += series[i];
        final_acc += f / (double)window;
        if (series.size() >= 3) {
            // successive differences cancel the training trend, leaving the
            // per-step sampling noise
            double mean_d = 0;
            for (size_t i = 1; i < series.size(); ++i) mean_d += series[i] - series[i - 1];
            mean_d /= (double)(series.size() - 1);
            double v = 0;
            for (size_t i = 1; i < series.size(); ++i) {
                const double d = series[i] - series[i - 1] - mean_d;
                v += d * d;
            }
            var_acc += v / (double)(series.size() - 2);
        }
    }
    arm.mean_final = arm.losses.empty() ? 0 : final_acc / (double)arm.losses.size();
    arm.mean_step_var = arm.losses.empty() ? 0 : var_acc / (double)arm.losses.size();
}

}  // namespace detail

// Two arms differing in exactly one component, sharing init and data-order
// seeds. Known names: rope_vs_sinusoidal, rope_plus_learnable, expert_mlp,
// explicit_sampling.
inline AblationResult run_ablation(const std::string& name, int64_t steps,
                                   const std::vector<uint64_t>& seeds,
                                   const EncodedDataset& data, const DitConfig& base_cfg,
                                   const DitTrainOpts& base_opts) {
    DitConfig cfg_a = base_cfg, cfg_b = base_cfg;
    DitTrainOpts opts_a = base_opts, opts_b = base_opts;
    AblationResult res;
    res.name = name;
    if (name == "rope_vs_sinusoidal") {
        cfg_a.use_rope = true;
        cfg_b.use_rope = false;
        res.a.name = "rope";
        res.b.name = "sinusoidal";
    } else if (name == "rope_plus_learnable") {
        cfg_b.learnable_abs_pos = true;
        cfg_b.abs_pos_slots = base_opts.pack_tokens;
        res.a.name = "rope";
        res.b.name = "rope+learnable";
    } else if (name == "expert_mlp") {
        cfg_a.expert_mlp = false;
        cfg_b.expert_mlp = true;
        res.a.name = "shared_mlp";
        res.b.name = "expert_mlp";
    } else if (name == "explicit_sampling") {
        opts_a.explicit_sampling = true;
        opts_b.explicit_sampling = false;
        res.a.name = "explicit";
        res.b.name = "naive";
    } else {
        check(false, "ablate: unknown ablation " + name);
    }

    check(!seeds.empty(), "ablate: need at least one seed");
    for (uint64_t seed : seeds) {
        DitTrainer ta, tb;
        ta.init(cfg_a, opts_a, seed);
        tb.init(cfg_b, opts_b, seed);
        ta.latent_scale = tb.latent_scale = data.latent_scale;
        res.a.param_count = ta.ps.total_params();
        res.b.param_count = tb.ps.total_params();
        std::vector<double> la, lb;
        if (steps == 0) {
            // diagnostic mode: score both arms on one shared batch, so with
            // zero-initialized gates and head the losses must coincide
            DitTrainer::Batch b = ta.draw_batch(data);
            Graph ga;
            BoundParams Pa = bind_frozen(ga, ta.ps);
            la.push_back(ga.val(ta.batch_loss(ga, Pa, b))[0]);
            Graph gb;
            BoundParams Pb = bind_frozen(gb, tb.ps);
            lb.push_back(gb.val(tb.batch_loss(gb, Pb, b))[0]);
        }
        for (int64_t i = 0; i < steps; ++i) {
            la.push_back(ta.step_once(data));
            lb.push_back(tb.step_once(data));
        }
        res.a.losses.push_back(std::move(la));
        res.b.losses.push_back(std::move(lb));
    }
    detail::arm_stats(res.a);
    detail::arm_stats(res.b);
    if (name == "explicit_sampling") {
        res.verdict = res.a.mean_step_var < res.b.mean_step_var
                          ? res.a.name + " wins (lower per-step loss variance)"
                          : res.b.name + " wins (lower per-step loss variance)";
    } else {
        res.verdict = res.a.mean_final <= res.b.mean_final
                          ? res.a.name + " wins (lower final loss)"
                          : res.b.name + " wins (lower final loss)";
    }
    return res;
}

// ---------------------------------------------------------------------------
// CSV logs

inline void write_csv(const std::string& path, const std::string& header,
                      const std::vector<std::vector<double>>& rows) {
    FILE* f = std::fopen(path.c_str(), "w");
    check(f != nullptr, "log: cannot open " + path);
    std::fprintf(f, "%s\n", header.c_str());
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i)
            std::fprintf(f, "%s%.9g", i ? "," : "", row[i]);
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

}  // namespace dv

#endif  // DV_TRAINER_HPP
