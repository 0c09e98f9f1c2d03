#ifndef DV_DIT_HPP
#define DV_DIT_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "framepack.hpp"
#include "graph.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "rope.hpp"
#include "tensor.hpp"

namespace dv {

struct DitConfig {
    int64_t d_model = 96;
    int64_t n_heads = 6;
    int64_t n_layers = 4;
    int64_t patch = 2;
    int64_t latent_channels = 8;
    int64_t vocab = 64;
    int64_t t_emb_dim = 256;
    int64_t mlp_ratio = 4;
    bool expert_adaln = true;   // separate text/vision modulation heads
    bool expert_mlp = false;    // also split the MLP per modality
    bool use_rope = true;       // off: fixed sinusoidal absolute positions
    bool learnable_abs_pos = false;  // extra learned table on top of rope
    int64_t abs_pos_slots = 0;
    int64_t in_channel_mult = 1;  // 2 when a condition is channel-concatenated
    // training-grid extents, for rope tables and extrapolation accounting
    int64_t grid_t = 5, grid_y = 2, grid_x = 2;

    int64_t head_dim() const { return d_model / n_heads; }
    int64_t patch_in() const { return patch * patch * latent_channels * in_channel_mult; }
    int64_t patch_out() const { return patch * patch * latent_channels; }
};

// Modulation head bias layout: six d_model slices in the order
// shift1, scale1, gate1, shift2, scale2, gate2. Weights start at zero and
// scale slices at one, so every block is the identity at initialization.
inline Tensor adaln_bias_init(int64_t d) {
    Tensor b({6 * d});
    for (int64_t i = 0; i < d; ++i) {
        b[1 * d + i] = 1.0f;
        b[4 * d + i] = 1.0f;
    }
    return b;
}

inline void init_dit(ParamStore& ps, const DitConfig& cfg, Rng& rng) {
    const int64_t d = cfg.d_model;
    check(cfg.n_heads >= 1 && d % cfg.n_heads == 0, "dit: heads must divide d_model");
    check(cfg.head_dim() % 16 == 0, "dit: head_dim must be a multiple of 16");
    const double w_std = 0.02;
    ps.add("text.embed", randn<float>(rng, {cfg.vocab, d}, w_std));
    ps.add("patch.w", randn<float>(rng, {cfg.patch_in(), d}, w_std));
    ps.add("patch.b", Tensor({d}));
    ps.add("tmlp.w1", randn<float>(rng, {cfg.t_emb_dim, d}, w_std));
    ps.add("tmlp.b1", Tensor({d}));
    ps.add("tmlp.w2", randn<float>(rng, {d, d}, w_std));
    ps.add("tmlp.b2", Tensor({d}));
    if (cfg.learnable_abs_pos) {
        check(cfg.abs_pos_slots > 0, "dit: learnable_abs_pos needs abs_pos_slots");
        ps.add("pos.table", Tensor({cfg.abs_pos_slots, d}));
    }
    const int64_t dm = d * cfg.mlp_ratio;
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "blk" + std::to_string(i) + ".";
        if (cfg.expert_adaln) {
            ps.add(p + "mod.vis.w", Tensor({d, 6 * d}));
            ps.add(p + "mod.vis.b", adaln_bias_init(d));
            ps.add(p + "mod.txt.w", Tensor({d, 6 * d}));
            ps.add(p + "mod.txt.b", adaln_bias_init(d));
        } else {
            ps.add(p + "mod.w", Tensor({d, 6 * d}));
            ps.add(p + "mod.b", adaln_bias_init(d));
        }
        ps.add(p + "attn.wqkv", randn<float>(rng, {d, 3 * d}, w_std));
        ps.add(p + "attn.bqkv", Tensor({3 * d}));
        ps.add(p + "attn.wo", randn<float>(rng, {d, d}, w_std));
        ps.add(p + "attn.bo", Tensor({d}));
        if (cfg.expert_mlp) {
            for (const char* m : {"mlp.vis.", "mlp.txt."}) {
                ps.add(p + m + "w1", randn<float>(rng, {d, dm}, w_std));
                ps.add(p + m + "b1", Tensor({dm}));
                ps.add(p + m + "w2", randn<float>(rng, {dm, d}, w_std));
                ps.add(p + m + "b2", Tensor({d}));
            }
        } else {
            ps.add(p + "mlp.w1", randn<float>(rng, {d, dm}, w_std));
            ps.add(p + "mlp.b1", Tensor({dm}));
            ps.add(p + "mlp.w2", randn<float>(rng, {dm, d}, w_std));
            ps.add(p + "mlp.b2", Tensor({d}));
        }
    }
    Tensor fb({2 * d});
    for (int64_t i = 0; i < d; ++i) fb[d + i] = 1.0f;  // shift zeros, scale ones
    ps.add("final.mod.w", Tensor({d, 2 * d}));
    ps.add("final.mod.b", std::move(fb));
    ps.add("final.head.w", Tensor({d, cfg.patch_out()}));
    ps.add("final.head.b", Tensor({cfg.patch_out()}));
}

struct DitExample {
    std::vector<int64_t> text_ids;
    Tensor z;     // (T',H',W',C*in_channel_mult)
    int64_t t = 1;  // diffusion timestep
};

struct ExampleSpan {
    int64_t text_start = 0, text_len = 0, vis_start = 0, vis_len = 0;
    int64_t t_lat = 0, gh = 0, gw = 0;
};

struct DitForward {
    std::vector<int> v;          // per-example v prediction, (T',H',W',C)
    std::vector<ExampleSpan> spans;
    int tokens_in = -1;          // (L,d) before the block stack
    int tokens_out = -1;         // (L,d) after the block stack
    int head = -1;               // (L,patch_out) per-token head output
    int64_t L = 0;
};

namespace detail {

template <class S>
void throw_if_not_finite(const TensorT<S>& t, const std::string& where) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i]))
            throw std::runtime_error("dit: non-finite activation after " + where);
}

}  // namespace detail

// Runs the transformer over one packed row of examples. Sequence layout is
// [text_0, vision_0, text_1, vision_1, ...] with a block-diagonal mask, so
// a single example is just the degenerate one-block case. Coordinate scale
// factors below 1 squeeze larger evaluation grids into the training range
// (interpolation); at 1 the grid extends past it (extrapolation).
template <class S>
DitForward dit_forward(GraphT<S>& g, const BoundParams& P, const DitConfig& cfg,
                       const RopeTable& rope, const std::vector<DitExample>& examples,
                       double scale_t = 1.0, double scale_y = 1.0, double scale_x = 1.0) {
    check(!examples.empty(), "dit: empty example list");
    const int64_t d = cfg.d_model;
    const int64_t E = (int64_t)examples.size();

    DitForward out;
    std::vector<int> parts;
    std::vector<std::array<int64_t, 3>> coords;
    std::vector<uint8_t> is_vision;
    std::vector<int64_t> token2ex, ex_ids;
    int64_t at = 0;
    for (int64_t e = 0; e < E; ++e) {
        const DitExample& ex = examples[(size_t)e];
        check(ex.z.rank() == 4, "dit: latent must be (T,H,W,C)");
        check(ex.z.shape[3] == cfg.latent_channels * cfg.in_channel_mult,
              "dit: latent channel mismatch");
        ExampleSpan sp;
        sp.t_lat = ex.z.shape[0];
        sp.gh = ex.z.shape[1] / cfg.patch;
        sp.gw = ex.z.shape[2] / cfg.patch;
        sp.text_start = at;
        sp.text_len = (int64_t)ex.text_ids.size();
        sp.vis_start = at + sp.text_len;
        sp.vis_len = sp.t_lat * sp.gh * sp.gw;

        for (int64_t k = 0; k < sp.text_len; ++k) {
            check(ex.text_ids[(size_t)k] >= 0 && ex.text_ids[(size_t)k] < cfg.vocab,
                  "dit: text token id out of range");
            coords.push_back({-1, -1, -1});
            is_vision.push_back(0);
            token2ex.push_back(e);
            ex_ids.push_back(e);
        }
        for (int64_t t = 0; t < sp.t_lat; ++t)
            for (int64_t y = 0; y < sp.gh; ++y)
                for (int64_t x = 0; x < sp.gw; ++x) {
                    coords.push_back({t, y, x});
                    is_vision.push_back(1);
                    token2ex.push_back(e);
                    ex_ids.push_back(e);
                }
        at = sp.vis_start + sp.vis_len;
        out.spans.push_back(sp);

        int txt = g.gather_rows(P("text.embed"), ex.text_ids);
        int vis =
            g.linear(g.patchify(g.input(ex.z.template cast<S>()), cfg.patch), P("patch.w"),
                     P("patch.b"));
        if (!cfg.use_rope) {
            Tensor abs({sp.vis_len, d});
            for (int64_t n = 0; n < sp.vis_len; ++n) {
                Tensor row = sinusoidal_embedding((double)n, d);
                for (int64_t j = 0; j < d; ++j) abs.at2(n, j) = row[j];
            }
            vis = g.add(vis, g.input(abs.template cast<S>()));
        }
        if (cfg.learnable_abs_pos) {
            std::vector<int64_t> slots((size_t)sp.vis_len);
            for (int64_t n = 0; n < sp.vis_len; ++n) {
                check(n < cfg.abs_pos_slots, "dit: abs position table too small");
                slots[(size_t)n] = n;
            }
            vis = g.add(vis, g.gather_rows(P("pos.table"), slots));
        }
        parts.push_back(txt);
        parts.push_back(vis);
    }
    const int64_t L = at;
    out.L = L;
    int x = g.concat_rows(parts);
    out.tokens_in = x;

    // conditioning vector per example from its diffusion timestep
    Tensor temb({E, cfg.t_emb_dim});
    for (int64_t e = 0; e < E; ++e) {
        Tensor row = sinusoidal_embedding((double)examples[(size_t)e].t, cfg.t_emb_dim);
        for (int64_t j = 0; j < cfg.t_emb_dim; ++j) temb.at2(e, j) = row[j];
    }
    int cond =
        g.linear(g.silu(g.linear(g.input(temb.template cast<S>()), P("tmlp.w1"), P("tmlp.b1"))),
                 P("tmlp.w2"), P("tmlp.b2"));

    TensorT<S> cosT, sinT;
    if (cfg.use_rope) {
        Tensor cosF, sinF;
        rope_angles(rope, coords, is_vision, scale_t, scale_y, scale_x, &cosF, &sinF);
        cosT = cosF.template cast<S>();
        sinT = sinF.template cast<S>();
    }
    TensorT<S> mask = build_mask(ex_ids).template cast<S>();

    // expands an (E,d) slice of a modulation output to one row per token
    auto expand = [&](int mod, int64_t slice) {
        return g.gather_rows(g.slice_channels(mod, slice * d, (slice + 1) * d), token2ex);
    };

    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "blk" + std::to_string(i) + ".";
        std::array<int, 6> m;
        if (cfg.expert_adaln) {
            int mv = g.linear(cond, P(p + "mod.vis.w"), P(p + "mod.vis.b"));
            int mt = g.linear(cond, P(p + "mod.txt.w"), P(p + "mod.txt.b"));
            for (int64_t s = 0; s < 6; ++s)
                m[(size_t)s] = g.where_rows(expand(mv, s), expand(mt, s), is_vision);
        } else {
            int ms = g.linear(cond, P(p + "mod.w"), P(p + "mod.b"));
            for (int64_t s = 0; s < 6; ++s) m[(size_t)s] = expand(ms, s);
        }

        int ain = g.add(g.mul(g.layernorm(x, 1e-5f), m[1]), m[0]);
        int qkv = g.linear(ain, P(p + "attn.wqkv"), P(p + "attn.bqkv"));
        int q = g.slice_channels(qkv, 0, d);
        int k = g.slice_channels(qkv, d, 2 * d);
        int v = g.slice_channels(qkv, 2 * d, 3 * d);
        if (cfg.use_rope) {
            q = g.rope(q, cfg.n_heads, cosT, sinT);
            k = g.rope(k, cfg.n_heads, cosT, sinT);
        }
        int att = g.attention(q, k, v, cfg.n_heads, mask);
        att = g.linear(att, P(p + "attn.wo"), P(p + "attn.bo"));
        int h = g.add(x, g.mul(m[2], att));

        int min = g.add(g.mul(g.layernorm(h, 1e-5f), m[4]), m[3]);
        int mlp;
        if (cfg.expert_mlp) {
            int mv = g.linear(g.silu(g.linear(min, P(p + "mlp.vis.w1"), P(p + "mlp.vis.b1"))),
                              P(p + "mlp.vis.w2"), P(p + "mlp.vis.b2"));
            int mt = g.linear(g.silu(g.linear(min, P(p + "mlp.txt.w1"), P(p + "mlp.txt.b1"))),
                              P(p + "mlp.txt.w2"), P(p + "mlp.txt.b2"));
            mlp = g.where_rows(mv, mt, is_vision);
        } else {
            mlp = g.linear(g.silu(g.linear(min, P(p + "mlp.w1"), P(p + "mlp.b1"))),
                           P(p + "mlp.w2"), P(p + "mlp.b2"));
        }
        x = g.add(h, g.mul(m[5], mlp));
        detail::throw_if_not_finite(g.val(x), "block " + std::to_string(i));
    }
    out.tokens_out = x;

    int fmod = g.linear(cond, P("final.mod.w"), P("final.mod.b"));
    int fshift = g.gather_rows(g.slice_channels(fmod, 0, d), token2ex);
    int fscale = g.gather_rows(g.slice_channels(fmod, d, 2 * d), token2ex);
    int y = g.add(g.mul(g.layernorm(x, 1e-5f), fscale), fshift);
    int head = g.linear(y, P("final.head.w"), P("final.head.b"));
    out.head = head;

    for (int64_t e = 0; e < E; ++e) {
        const ExampleSpan& sp = out.spans[(size_t)e];
        int rows = g.slice_rows(head, sp.vis_start, sp.vis_start + sp.vis_len);
        out.v.push_back(
            g.unpatchify(rows, sp.t_lat, sp.gh, sp.gw, cfg.patch, cfg.latent_channels));
    }
    return out;
}

// Mean over examples of the per-example MSE against its v target, matching
// the per-example loss weights of the packing scheme (text and padding
// contribute nothing, every example counts equally).
template <class S>
int dit_v_loss(GraphT<S>& g, const DitForward& f, const std::vector<Tensor>& v_targets) {
    check(f.v.size() == v_targets.size(), "dit loss: target count mismatch");
    int acc = -1;
    for (size_t e = 0; e < f.v.size(); ++e) {
        int l = g.mse(f.v[e], g.input(v_targets[e].template cast<S>()));
        acc = acc < 0 ? l : g.add(acc, l);
    }
    return g.scale(acc, 1.0 / (double)f.v.size());
}

}  // namespace dv

#endif
