#ifndef DV_VAE_HPP
#define DV_VAE_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "conv3d.hpp"
#include "graph.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dv {

struct VaeConfig {
    int64_t base_channels = 16;
    int64_t latent_channels = 8;
    std::array<int64_t, 4> stage_multipliers = {1, 2, 4, 4};
    int64_t temporal_kernel = 3;
    int64_t blocks_per_stage = 2;
    float l2_weight = 1.0f;
    float perceptual_weight = 0.1f;
    float kl_weight = 1e-4f;
    float gan_weight = 0.05f;
    int64_t gan_warmup_steps = 200;

    std::array<int64_t, 4> stage_channels() const {
        std::array<int64_t, 4> ch;
        for (size_t i = 0; i < 4; ++i) ch[i] = base_channels * stage_multipliers[i];
        return ch;
    }
};

// One step of a sequential conv stack. Layer lists are the single source of
// truth for an architecture: the same list drives the training graph, the
// plain inference runner, and the chunked context-parallel runner.
struct VaeLayer {
    enum Kind { kConv, kNorm, kSilu, kPushSkip, kAddSkip, kUpTime, kUpSpace };
    Kind kind = kSilu;
    Conv3dSpec spec{};                // kConv
    std::string w, b;                 // kConv parameter names
    std::string gamma, beta;          // kNorm parameter names
    int64_t group_channels = 0;       // kNorm
};

// Registers parameters while building a layer list, so architecture and
// initialization cannot drift apart.
struct LayerBuilder {
    ParamStore& ps;
    Rng& rng;
    std::vector<VaeLayer> layers;

    // wstd < 0 picks fan-in scaling; 0 zero-initializes (residual tails)
    void conv(const std::string& name, int64_t kt, int64_t cin, int64_t cout, int64_t st,
              int64_t ss, double wstd = -1.0) {
        VaeLayer l;
        l.kind = VaeLayer::kConv;
        l.spec = Conv3dSpec{kt, 3, 3, cin, cout, st, ss, ss, TemporalPad::kCausal};
        l.w = name + ".w";
        l.b = name + ".b";
        const double std_eff = wstd < 0.0 ? std::sqrt(2.0 / (double)(kt * 9 * cin)) : wstd;
        ps.add(l.w, std_eff == 0.0 ? Tensor({kt, 3, 3, cin, cout})
                                   : randn<float>(rng, {kt, 3, 3, cin, cout}, std_eff));
        ps.add(l.b, Tensor({cout}));
        layers.push_back(std::move(l));
    }

    void norm(const std::string& name, int64_t channels) {
        VaeLayer l;
        l.kind = VaeLayer::kNorm;
        l.group_channels = std::gcd<int64_t>(8, channels);
        l.gamma = name + ".g";
        l.beta = name + ".b";
        ps.add(l.gamma, Tensor({channels}, std::vector<float>((size_t)channels, 1.0f)));
        ps.add(l.beta, Tensor({channels}));
        layers.push_back(std::move(l));
    }

    void op(VaeLayer::Kind k) {
        VaeLayer l;
        l.kind = k;
        layers.push_back(std::move(l));
    }

    // pre-activation residual block; the closing conv starts at zero so the
    // block is the identity at initialization
    void resblock(const std::string& prefix, int64_t channels, int64_t kt) {
        op(VaeLayer::kPushSkip);
        norm(prefix + ".n1", channels);
        op(VaeLayer::kSilu);
        conv(prefix + ".c1", kt, channels, channels, 1, 1);
        norm(prefix + ".n2", channels);
        op(VaeLayer::kSilu);
        conv(prefix + ".c2", kt, channels, channels, 1, 1, 0.0);
        op(VaeLayer::kAddSkip);
    }
};

struct VaeModel {
    VaeConfig cfg;
    ParamStore ps;
    std::vector<VaeLayer> enc, dec;

    void init(uint64_t seed) {
        Rng rng(seed);
        const auto ch = cfg.stage_channels();
        const int64_t kt = cfg.temporal_kernel;
        const int64_t C = cfg.latent_channels;

        LayerBuilder e{ps, rng, {}};
        e.conv("enc.stem", kt, 3, ch[0], 1, 1);
        for (int64_t s = 0; s < 4; ++s) {
            for (int64_t b = 0; b < cfg.blocks_per_stage; ++b)
                e.resblock("enc.s" + std::to_string(s) + ".b" + std::to_string(b), ch[(size_t)s],
                           kt);
            if (s < 3) {
                // transitions 1 and 2 halve time and space, the last one
                // space only: 4x temporal, 8x8 spatial overall
                const int64_t st = s < 2 ? 2 : 1;
                e.conv("enc.down" + std::to_string(s), kt, ch[(size_t)s], ch[(size_t)s + 1], st,
                       2);
            }
        }
        e.norm("enc.head.n", ch[3]);
        e.op(VaeLayer::kSilu);
        e.conv("enc.head.conv", kt, ch[3], 2 * C, 1, 1, 0.02);
        enc = std::move(e.layers);

        LayerBuilder d{ps, rng, {}};
        d.conv("dec.stem", kt, C, ch[3], 1, 1);
        for (int64_t s = 3; s >= 0; --s) {
            for (int64_t b = 0; b < cfg.blocks_per_stage; ++b)
                d.resblock("dec.s" + std::to_string(s) + ".b" + std::to_string(b), ch[(size_t)s],
                           kt);
            if (s > 0) {
                if (s < 3) d.op(VaeLayer::kUpTime);
                d.op(VaeLayer::kUpSpace);
                d.conv("dec.up" + std::to_string(s - 1), kt, ch[(size_t)s], ch[(size_t)s - 1], 1,
                       1);
            }
        }
        d.norm("dec.head.n", ch[0]);
        d.op(VaeLayer::kSilu);
        d.conv("dec.head.conv", kt, ch[0], 3, 1, 1, 0.02);
        dec = std::move(d.layers);
    }
};

inline void check_video_shape(const std::vector<int64_t>& sh) {
    check(sh.size() == 4 && sh[3] == 3, "vae: video must be (T,H,W,3)");
    check(sh[0] >= 1 && (sh[0] - 1) % 4 == 0, "vae: frame count must be 1 mod 4");
    check(sh[1] % 8 == 0 && sh[2] % 8 == 0, "vae: height and width must be divisible by 8");
}

inline std::vector<int64_t> vae_latent_shape(const VaeConfig& cfg,
                                             const std::vector<int64_t>& video_sh) {
    check_video_shape(video_sh);
    return {1 + (video_sh[0] - 1) / 4, video_sh[1] / 8, video_sh[2] / 8, cfg.latent_channels};
}

template <class S, class NameFn>
int run_layers_graph(GraphT<S>& g, const NameFn& P, const std::vector<VaeLayer>& layers, int x) {
    std::vector<int> skips;
    for (const VaeLayer& l : layers) {
        switch (l.kind) {
            case VaeLayer::kConv: x = g.conv3d(x, P(l.w), P(l.b), l.spec); break;
            case VaeLayer::kNorm:
                x = g.groupnorm_frame(x, l.group_channels, S(1e-5), P(l.gamma), P(l.beta));
                break;
            case VaeLayer::kSilu: x = g.silu(x); break;
            case VaeLayer::kPushSkip: skips.push_back(x); break;
            case VaeLayer::kAddSkip:
                x = g.add(x, skips.back());
                skips.pop_back();
                break;
            case VaeLayer::kUpTime: x = g.upsample_time_causal(x); break;
            case VaeLayer::kUpSpace: x = g.upsample_nearest2x(x); break;
        }
    }
    check(skips.empty(), "vae layers: unbalanced skip stack");
    return x;
}

inline Tensor run_layers_plain(const ParamStore& ps, const std::vector<VaeLayer>& layers,
                               Tensor x) {
    std::vector<Tensor> skips;
    for (const VaeLayer& l : layers) {
        switch (l.kind) {
            case VaeLayer::kConv:
                x = conv3d_forward(x, ps.at(l.w).value, ps.at(l.b).value, l.spec);
                break;
            case VaeLayer::kNorm:
                x = groupnorm_frame_forward(x, l.group_channels, 1e-5f, ps.at(l.gamma).value,
                                            ps.at(l.beta).value);
                break;
            case VaeLayer::kSilu:
                for (int64_t i = 0; i < x.numel(); ++i) x[i] = silu_val(x[i]);
                break;
            case VaeLayer::kPushSkip: skips.push_back(x); break;
            case VaeLayer::kAddSkip: {
                const Tensor& s = skips.back();
                for (int64_t i = 0; i < x.numel(); ++i) x[i] += s[i];
                skips.pop_back();
                break;
            }
            case VaeLayer::kUpTime: x = upsample_time_causal_forward(x); break;
            case VaeLayer::kUpSpace: x = upsample_nearest2x_forward(x); break;
        }
    }
    return x;
}

struct LatentDist {
    Tensor mean, logvar;
};

inline LatentDist vae_encode(const VaeModel& m, const Tensor& video) {
    check_video_shape(video.shape);
    Tensor h = run_layers_plain(m.ps, m.enc, video);
    const int64_t C = m.cfg.latent_channels;
    const int64_t rows = h.numel() / (2 * C);
    LatentDist d;
    d.mean = Tensor({h.shape[0], h.shape[1], h.shape[2], C});
    d.logvar = Tensor(d.mean.shape);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) {
            d.mean[r * C + c] = h[r * 2 * C + c];
            d.logvar[r * C + c] = h[r * 2 * C + C + c];
        }
    return d;
}

inline Tensor vae_decode(const VaeModel& m, const Tensor& latent) {
    check(latent.rank() == 4 && latent.shape[3] == m.cfg.latent_channels,
          "vae: latent must be (T,H,W,C)");
    for (int64_t i = 0; i < latent.numel(); ++i)
        check(std::isfinite(latent[i]), "vae: non-finite latent");
    return run_layers_plain(m.ps, m.dec, latent);
}

// graph-side encode, splitting the head output into mean and logvar
template <class S, class NameFn>
std::pair<int, int> vae_encode_graph(GraphT<S>& g, const NameFn& P, const VaeModel& m, int video) {
    int h = run_layers_graph(g, P, m.enc, video);
    const auto& sh = g.val(h).shape;
    const int64_t C = m.cfg.latent_channels;
    int flat = g.reshape(h, {g.val(h).numel() / (2 * C), 2 * C});
    int mean = g.slice_channels(flat, 0, C);
    int logvar = g.slice_channels(flat, C, 2 * C);
    std::vector<int64_t> lsh = {sh[0], sh[1], sh[2], C};
    return {g.reshape(mean, lsh), g.reshape(logvar, lsh)};
}

template <class S, class NameFn>
int vae_decode_graph(GraphT<S>& g, const NameFn& P, const VaeModel& m, int latent) {
    check(g.val(latent).shape[3] == m.cfg.latent_channels, "vae: latent channel mismatch");
    return run_layers_graph(g, P, m.dec, latent);
}

// frozen random feature net standing in for a perceptual metric: three
// strided per-frame convolutions, distance measured in its feature space
struct Perceptual {
    ParamStore ps;
    std::vector<VaeLayer> layers;

    void init(uint64_t seed) {
        Rng rng(seed);
        LayerBuilder b{ps, rng, {}};
        b.conv("perc.c0", 1, 3, 8, 1, 2);
        b.op(VaeLayer::kSilu);
        b.conv("perc.c1", 1, 8, 16, 1, 2);
        b.op(VaeLayer::kSilu);
        b.conv("perc.c2", 1, 16, 16, 1, 2);
        layers = std::move(b.layers);
    }
};

template <class S, class NameFn>
int perceptual_graph(GraphT<S>& g, const NameFn& P, const Perceptual& pc, int a, int b) {
    return g.mse(run_layers_graph(g, P, pc.layers, a), run_layers_graph(g, P, pc.layers, b));
}

inline double perceptual_value(const Perceptual& pc, const Tensor& a, const Tensor& b) {
    Tensor fa = run_layers_plain(pc.ps, pc.layers, a);
    Tensor fb = run_layers_plain(pc.ps, pc.layers, b);
    double s = 0.0;
    for (int64_t i = 0; i < fa.numel(); ++i) {
        const double d = (double)fa[i] - (double)fb[i];
        s += d * d;
    }
    return s / (double)fa.numel();
}

// strided causal patch discriminator; width scales with `base`
struct Discriminator {
    ParamStore ps;
    std::vector<VaeLayer> layers;

    void init(uint64_t seed, int64_t base = 16, int64_t kt = 3) {
        Rng rng(seed);
        LayerBuilder b{ps, rng, {}};
        b.conv("disc.c0", kt, 3, base, 1, 2);
        b.op(VaeLayer::kSilu);
        b.conv("disc.c1", kt, base, 2 * base, 2, 2);
        b.op(VaeLayer::kSilu);
        b.conv("disc.c2", kt, 2 * base, 4 * base, 2, 2);
        b.op(VaeLayer::kSilu);
        b.conv("disc.c3", kt, 4 * base, 1, 1, 1, 0.02);
        layers = std::move(b.layers);
    }
};

// hinge objectives: D pushes real logits above +1 and fake below -1, G pulls
// fake logits up
template <class S>
int hinge_d_loss(GraphT<S>& g, int real_logits, int fake_logits) {
    int lr = g.mean_all(g.relu(g.add_const(g.scale(real_logits, S(-1)), S(1))));
    int lf = g.mean_all(g.relu(g.add_const(fake_logits, S(1))));
    return g.add(lr, lf);
}

template <class S>
int hinge_g_loss(GraphT<S>& g, int fake_logits) {
    return g.scale(g.mean_all(fake_logits), S(-1));
}

struct VaeLossNodes {
    int total = -1, recon = -1, l2 = -1, perc = -1, kl = -1, gan = -1;  // gan -1 when inactive
};

// assembles the weighted objective from already-built graph nodes. Kept
// separate from the forward pass so the formula is testable on its own;
// pass -1 to drop the perceptual or adversarial term.
template <class S>
VaeLossNodes vae_loss_terms(GraphT<S>& g, const VaeConfig& cfg, int video, int recon, int mean,
                            int logvar, int perc, int fake_logits) {
    VaeLossNodes n;
    n.recon = recon;
    n.l2 = g.mse(recon, video);
    n.kl = g.kl_mean(mean, logvar);
    n.perc = perc;
    int total = g.add(g.scale(n.l2, S(cfg.l2_weight)), g.scale(n.kl, S(cfg.kl_weight)));
    if (perc >= 0) total = g.add(total, g.scale(perc, S(cfg.perceptual_weight)));
    if (fake_logits >= 0) {
        n.gan = hinge_g_loss(g, fake_logits);
        total = g.add(total, g.scale(n.gan, S(cfg.gan_weight)));
    }
    n.total = total;

    const char* names[] = {"l2", "perceptual", "kl", "gan"};
    const int ids[] = {n.l2, n.perc, n.kl, n.gan};
    for (int i = 0; i < 4; ++i)
        if (ids[i] >= 0 && !std::isfinite((double)g.val(ids[i])[0]))
            throw std::runtime_error(std::string("vae: non-finite ") + names[i] + " component");
    return n;
}

// full generator-side objective: encode, sample, decode, then weighted
// l2 + perceptual + kl (+ adversarial once past warmup, against a frozen
// discriminator). `eps` is the reparameterization noise, supplied by the
// caller so a training step is a pure function of its inputs.
template <class S>
VaeLossNodes vae_loss_graph(GraphT<S>& g, const VaeModel& m, const BoundParams& P,
                            const Perceptual& pc, const BoundParams& PP,
                            const Discriminator* disc, const BoundParams* PD, int video,
                            const Tensor& eps, int64_t step) {
    auto [mean, logvar] = vae_encode_graph(g, P, m, video);
    int z = g.reparam(mean, logvar, eps.cast<S>());
    int recon = vae_decode_graph(g, P, m, z);
    int perc = perceptual_graph(g, PP, pc, recon, video);
    int fake = -1;
    if (disc != nullptr && step >= m.cfg.gan_warmup_steps)
        fake = run_layers_graph(g, *PD, disc->layers, recon);
    return vae_loss_terms(g, m.cfg, video, recon, mean, logvar, perc, fake);
}

}  // namespace dv

#endif
