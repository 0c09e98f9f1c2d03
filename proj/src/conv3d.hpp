#ifndef DV_CONV3D_HPP
#define DV_CONV3D_HPP

#include <cstdint>

#include "tensor.hpp"

namespace dv {

namespace test_hooks {
// Fault injection for the verify CLI: replaces causal temporal padding with
// centered padding, which makes outputs read future frames.
inline bool break_causal_pad = false;
}  // namespace test_hooks

enum class TemporalPad {
    kCausal,  // kt-1 zero frames before frame 0, none after
    kValid,   // no temporal padding (caller supplies halo context)
};

struct Conv3dSpec {
    int64_t kt = 1, kh = 1, kw = 1;
    int64_t cin = 1, cout = 1;
    int64_t st = 1, sh = 1, sw = 1;
    TemporalPad tpad = TemporalPad::kCausal;
};

// Effective front padding. Causal mode puts all kt-1 pad frames in front.
inline int64_t conv3d_front_pad(const Conv3dSpec& s) {
    if (s.tpad == TemporalPad::kValid) return 0;
    if (test_hooks::break_causal_pad) return (s.kt - 1) / 2;
    return s.kt - 1;
}

inline int64_t conv3d_back_pad(const Conv3dSpec& s) {
    if (s.tpad == TemporalPad::kValid) return 0;
    if (test_hooks::break_causal_pad) return s.kt - 1 - (s.kt - 1) / 2;
    return 0;
}

inline std::vector<int64_t> conv3d_out_shape(const std::vector<int64_t>& in_shape,
                                             const Conv3dSpec& s) {
    check(in_shape.size() == 4, "conv3d: input must be (T,H,W,Cin)");
    int64_t T = in_shape[0], H = in_shape[1], W = in_shape[2], C = in_shape[3];
    check(C == s.cin, "conv3d: channel mismatch");
    check(s.kt >= 1 && s.kh >= 1 && s.kw >= 1, "conv3d: kernel dims must be >= 1");
    check(s.kh % 2 == 1 && s.kw % 2 == 1, "conv3d: even spatial kernel sizes are rejected");
    int64_t t_out;
    if (s.tpad == TemporalPad::kCausal) {
        int64_t padded = T + s.kt - 1;
        check((padded - s.kt) % s.st == 0,
              "conv3d: stride does not evenly divide the padded temporal extent");
        t_out = (padded - s.kt) / s.st + 1;
    } else {
        check(T >= s.kt, "conv3d: valid-mode input shorter than kernel");
        t_out = (T - s.kt) / s.st + 1;  // floor; trailing frames allowed
    }
    int64_t h_out = (H - 1) / s.sh + 1;  // ceil(H/sh) via symmetric same-padding
    int64_t w_out = (W - 1) / s.sw + 1;
    return {t_out, h_out, w_out, s.cout};
}

// input (T,H,W,Cin), weight (kt,kh,kw,Cin,Cout), bias (Cout) or empty.
// Per-output accumulation order is fixed: taps in (dt,dy,dx) order, then cin
// ascending, so chunked execution over the temporal axis is bit-identical to
// a single pass.
template <class S>
TensorT<S> conv3d_forward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                          const Conv3dSpec& s) {
    auto osh = conv3d_out_shape(in.shape, s);
    TensorT<S> out(osh);
    const int64_t T = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int64_t TO = osh[0], HO = osh[1], WO = osh[2];
    const int64_t Ci = s.cin, Co = s.cout;
    const int64_t pt = conv3d_front_pad(s);
    const int64_t ph = (s.kh - 1) / 2, pw = (s.kw - 1) / 2;
    const bool has_bias = b.numel() > 0;
    const S* wp0 = w.ptr();
    const S* ip0 = in.ptr();
    S* op = out.ptr();

    for (int64_t ot = 0; ot < TO; ++ot) {
        const int64_t t0 = ot * s.st - pt;
        for (int64_t oy = 0; oy < HO; ++oy) {
            const int64_t y0 = oy * s.sh - ph;
            for (int64_t ox = 0; ox < WO; ++ox) {
                const int64_t x0 = ox * s.sw - pw;
                S* acc = op + ((ot * HO + oy) * WO + ox) * Co;
                if (has_bias) {
                    for (int64_t co = 0; co < Co; ++co) acc[co] = b[co];
                } else {
                    for (int64_t co = 0; co < Co; ++co) acc[co] = S(0);
                }
                for (int64_t dt = 0; dt < s.kt; ++dt) {
                    const int64_t it = t0 + dt;
                    if (it < 0 || it >= T) continue;
                    for (int64_t dy = 0; dy < s.kh; ++dy) {
                        const int64_t iy = y0 + dy;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t dx = 0; dx < s.kw; ++dx) {
                            const int64_t ix = x0 + dx;
                            if (ix < 0 || ix >= W) continue;
                            const S* inp = ip0 + ((it * H + iy) * W + ix) * Ci;
                            const S* wp = wp0 + ((dt * s.kh + dy) * s.kw + dx) * Ci * Co;
                            for (int64_t ci = 0; ci < Ci; ++ci) {
                                const S a = inp[ci];
                                const S* wr = wp + ci * Co;
                                for (int64_t co = 0; co < Co; ++co) acc[co] += a * wr[co];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

// Gradients. Gather formulation with disjoint writes per input element /
// weight tap, fixed iteration order.
template <class S>
void conv3d_backward(const TensorT<S>& in, const TensorT<S>& w, const Conv3dSpec& s,
                     const TensorT<S>& dout, TensorT<S>* din, TensorT<S>* dw, TensorT<S>* db) {
    const int64_t T = in.shape[0], H = in.shape[1], W = in.shape[2];
    const auto osh = conv3d_out_shape(in.shape, s);
    const int64_t TO = osh[0], HO = osh[1], WO = osh[2];
    const int64_t Ci = s.cin, Co = s.cout;
    const int64_t pt = conv3d_front_pad(s);
    const int64_t ph = (s.kh - 1) / 2, pw = (s.kw - 1) / 2;
    const S* dop = dout.ptr();
    const S* wp0 = w.ptr();
    const S* ip0 = in.ptr();

    if (din) {
        S* dip = din->ptr();
        for (int64_t it = 0; it < T; ++it) {
            for (int64_t iy = 0; iy < H; ++iy) {
                for (int64_t ix = 0; ix < W; ++ix) {
                    S* drow = dip + ((it * H + iy) * W + ix) * Ci;
                    for (int64_t dt = 0; dt < s.kt; ++dt) {
                        const int64_t num_t = it + pt - dt;
                        if (num_t < 0 || num_t % s.st != 0) continue;
                        const int64_t ot = num_t / s.st;
                        if (ot >= TO) continue;
                        for (int64_t dy = 0; dy < s.kh; ++dy) {
                            const int64_t num_y = iy + ph - dy;
                            if (num_y < 0 || num_y % s.sh != 0) continue;
                            const int64_t oy = num_y / s.sh;
                            if (oy >= HO) continue;
                            for (int64_t dx = 0; dx < s.kw; ++dx) {
                                const int64_t num_x = ix + pw - dx;
                                if (num_x < 0 || num_x % s.sw != 0) continue;
                                const int64_t ox = num_x / s.sw;
                                if (ox >= WO) continue;
                                const S* dor = dop + ((ot * HO + oy) * WO + ox) * Co;
                                const S* wp = wp0 + (((dt * s.kh + dy) * s.kw + dx) * Ci) * Co;
                                for (int64_t ci = 0; ci < Ci; ++ci) {
                                    const S* wr = wp + ci * Co;
                                    S acc = S(0);
                                    for (int64_t co = 0; co < Co; ++co) acc += dor[co] * wr[co];
                                    drow[ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (dw) {
        S* dwp = dw->ptr();
        for (int64_t dt = 0; dt < s.kt; ++dt) {
            for (int64_t dy = 0; dy < s.kh; ++dy) {
                for (int64_t dx = 0; dx < s.kw; ++dx) {
                    S* dslab = dwp + ((dt * s.kh + dy) * s.kw + dx) * Ci * Co;
                    for (int64_t ot = 0; ot < TO; ++ot) {
                        const int64_t it = ot * s.st - pt + dt;
                        if (it < 0 || it >= T) continue;
                        for (int64_t oy = 0; oy < HO; ++oy) {
                            const int64_t iy = oy * s.sh - ph + dy;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t ox = 0; ox < WO; ++ox) {
                                const int64_t ix = ox * s.sw - pw + dx;
                                if (ix < 0 || ix >= W) continue;
                                const S* inp = ip0 + ((it * H + iy) * W + ix) * Ci;
                                const S* dor = dop + ((ot * HO + oy) * WO + ox) * Co;
                                for (int64_t ci = 0; ci < Ci; ++ci) {
                                    const S a = inp[ci];
                                    S* dr = dslab + ci * Co;
                                    for (int64_t co = 0; co < Co; ++co) dr[co] += a * dor[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (db) {
        S* dbp = db->ptr();
        const int64_t n = TO * HO * WO;
        for (int64_t i = 0; i < n; ++i) {
            const S* dor = dop + i * Co;
            for (int64_t co = 0; co < Co; ++co) dbp[co] += dor[co];
        }
    }
}

}  // namespace dv

#endif
