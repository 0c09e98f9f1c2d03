#ifndef DV_OPS_HPP
#define DV_OPS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <type_traits>

#include "tensor.hpp"

namespace dv {

template <class S>
inline S silu_val(S x) {
    S sig = S(1) / (S(1) + std::exp(-x));
    return x * sig;
}

template <class S>
inline S silu_grad(S x) {
    S sig = S(1) / (S(1) + std::exp(-x));
    return sig * (S(1) + x * (S(1) - sig));
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis, no learned affine.

template <class S>
TensorT<S> layernorm_forward(const TensorT<S>& x, S eps) {
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
    TensorT<S> y(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x.ptr() + r * d;
        S* yr = y.ptr() + r * d;
        S mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= S(d);
        S var = 0;
        for (int64_t j = 0; j < d; ++j) {
            S c = xr[j] - mu;
            var += c * c;
        }
        var /= S(d);
        S inv = S(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv;
    }
    return y;
}

template <class S>
void layernorm_backward(const TensorT<S>& x, S eps, const TensorT<S>& dy, TensorT<S>& dx) {
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
    std::vector<S> xhat((size_t)d);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x.ptr() + r * d;
        const S* gr = dy.ptr() + r * d;
        S* dr = dx.ptr() + r * d;
        S mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= S(d);
        S var = 0;
        for (int64_t j = 0; j < d; ++j) {
            S c = xr[j] - mu;
            var += c * c;
        }
        var /= S(d);
        S inv = S(1) / std::sqrt(var + eps);
        S m1 = 0, m2 = 0;
        for (int64_t j = 0; j < d; ++j) {
            xhat[(size_t)j] = (xr[j] - mu) * inv;
            m1 += gr[j];
            m2 += gr[j] * xhat[(size_t)j];
        }
        m1 /= S(d);
        m2 /= S(d);
        for (int64_t j = 0; j < d; ++j) dr[j] += inv * (gr[j] - m1 - xhat[(size_t)j] * m2);
    }
}

// ---------------------------------------------------------------------------
// Group norm with statistics taken per frame, so no information crosses the
// temporal axis. x is (T,H,W,C), channels are split into groups of
// group_channels consecutive channels, stats run over H*W*group_channels
// within one frame.

template <class S>
TensorT<S> groupnorm_frame_forward(const TensorT<S>& x, int64_t group_channels, S eps,
                                   const TensorT<S>& gamma, const TensorT<S>& beta) {
    check(x.shape.size() == 4, "groupnorm_frame: input must be (T,H,W,C)");
    const int64_t T = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    check(C % group_channels == 0, "groupnorm_frame: C not divisible by group size");
    check(gamma.numel() == C && beta.numel() == C, "groupnorm_frame: affine size mismatch");
    const int64_t G = C / group_channels;
    const int64_t plane = H * W;
    TensorT<S> y(x.shape);
    for (int64_t t = 0; t < T; ++t) {
        const S* xt = x.ptr() + t * plane * C;
        S* yt = y.ptr() + t * plane * C;
        for (int64_t g = 0; g < G; ++g) {
            const int64_t c0 = g * group_channels;
            S mu = 0;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) mu += xt[p * C + c0 + c];
            const S n = S(plane * group_channels);
            mu /= n;
            S var = 0;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) {
                    S d = xt[p * C + c0 + c] - mu;
                    var += d * d;
                }
            var /= n;
            S inv = S(1) / std::sqrt(var + eps);
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) {
                    const int64_t ch = c0 + c;
                    yt[p * C + ch] = (xt[p * C + ch] - mu) * inv * gamma[ch] + beta[ch];
                }
        }
    }
    return y;
}

template <class S>
void groupnorm_frame_backward(const TensorT<S>& x, int64_t group_channels, S eps,
                              const TensorT<S>& gamma, const TensorT<S>& dy, TensorT<S>* dx,
                              TensorT<S>* dgamma, TensorT<S>* dbeta) {
    const int64_t T = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    const int64_t G = C / group_channels;
    const int64_t plane = H * W;
    for (int64_t t = 0; t < T; ++t) {
        const S* xt = x.ptr() + t * plane * C;
        const S* gt = dy.ptr() + t * plane * C;
        for (int64_t g = 0; g < G; ++g) {
            const int64_t c0 = g * group_channels;
            const S n = S(plane * group_channels);
            S mu = 0;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) mu += xt[p * C + c0 + c];
            mu /= n;
            S var = 0;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) {
                    S d = xt[p * C + c0 + c] - mu;
                    var += d * d;
                }
            var /= n;
            S inv = S(1) / std::sqrt(var + eps);
            // First moment sums of gamma-weighted upstream grad and of xhat.
            S m1 = 0, m2 = 0;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) {
                    const int64_t ch = c0 + c;
                    S xh = (xt[p * C + ch] - mu) * inv;
                    S gy = gt[p * C + ch] * gamma[ch];
                    m1 += gy;
                    m2 += gy * xh;
                }
            m1 /= n;
            m2 /= n;
            for (int64_t p = 0; p < plane; ++p)
                for (int64_t c = 0; c < group_channels; ++c) {
                    const int64_t ch = c0 + c;
                    S xh = (xt[p * C + ch] - mu) * inv;
                    S gy = gt[p * C + ch] * gamma[ch];
                    if (dx) (*dx)[(t * plane + p) * C + ch] += inv * (gy - m1 - xh * m2);
                    if (dgamma) (*dgamma)[ch] += gt[p * C + ch] * xh;
                    if (dbeta) (*dbeta)[ch] += gt[p * C + ch];
                }
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention over one packed sequence. q,k,v are (L,d) with d split
// into n_heads contiguous slices. mask is (L,L) additive, entries 0 or -inf.
// A row whose logits are all -inf has no valid key and is an error.

template <class S>
TensorT<S> attention_forward(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                             int64_t n_heads, const TensorT<S>& mask,
                             std::type_identity_t<TensorT<S>>* probs_out = nullptr) {
    check(q.shape.size() == 2 && q.shape == k.shape && q.shape == v.shape,
          "attention: q,k,v must share shape (L,d)");
    const int64_t L = q.shape[0], d = q.shape[1];
    check(d % n_heads == 0, "attention: d not divisible by n_heads");
    const int64_t dh = d / n_heads;
    check(mask.shape.size() == 2 && mask.shape[0] == L && mask.shape[1] == L,
          "attention: mask must be (L,L)");
    const S scale = S(1) / std::sqrt(S(dh));
    const S ninf = -std::numeric_limits<S>::infinity();

    TensorT<S> out(q.shape);
    TensorT<S> probs({n_heads, L, L});
    std::vector<S> logits((size_t)L);
    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t c0 = h * dh;
        for (int64_t i = 0; i < L; ++i) {
            const S* qi = q.ptr() + i * d + c0;
            S rowmax = ninf;
            for (int64_t j = 0; j < L; ++j) {
                S m = mask[i * L + j];
                S l;
                if (m == ninf) {
                    l = ninf;
                } else {
                    const S* kj = k.ptr() + j * d + c0;
                    S acc = 0;
                    for (int64_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
                    l = acc * scale + m;
                }
                logits[(size_t)j] = l;
                if (l > rowmax) rowmax = l;
            }
            if (rowmax == ninf)
                throw std::runtime_error("attention: fully masked query row " + std::to_string(i));
            S z = 0;
            S* pr = probs.ptr() + (h * L + i) * L;
            for (int64_t j = 0; j < L; ++j) {
                S e = logits[(size_t)j] == ninf ? S(0) : std::exp(logits[(size_t)j] - rowmax);
                pr[j] = e;
                z += e;
            }
            S invz = S(1) / z;
            S* oi = out.ptr() + i * d + c0;
            for (int64_t e = 0; e < dh; ++e) oi[e] = 0;
            for (int64_t j = 0; j < L; ++j) {
                pr[j] *= invz;
                if (pr[j] == S(0)) continue;
                const S* vj = v.ptr() + j * d + c0;
                const S p = pr[j];
                for (int64_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
            }
        }
    }
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

template <class S>
void attention_backward(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                        int64_t n_heads, const TensorT<S>& probs, const TensorT<S>& dout,
                        TensorT<S>* dq, TensorT<S>* dk, TensorT<S>* dv) {
    const int64_t L = q.shape[0], d = q.shape[1];
    const int64_t dh = d / n_heads;
    const S scale = S(1) / std::sqrt(S(dh));
    std::vector<S> dp((size_t)L), ds((size_t)L);
    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t c0 = h * dh;
        for (int64_t i = 0; i < L; ++i) {
            const S* pr = probs.ptr() + (h * L + i) * L;
            const S* doi = dout.ptr() + i * d + c0;
            S pdp = 0;
            for (int64_t j = 0; j < L; ++j) {
                const S* vj = v.ptr() + j * d + c0;
                S acc = 0;
                for (int64_t e = 0; e < dh; ++e) acc += doi[e] * vj[e];
                dp[(size_t)j] = acc;
                pdp += pr[j] * acc;
            }
            for (int64_t j = 0; j < L; ++j) ds[(size_t)j] = pr[j] * (dp[(size_t)j] - pdp);
            const S* qi = q.ptr() + i * d + c0;
            S* dqi = dq ? dq->ptr() + i * d + c0 : nullptr;
            for (int64_t j = 0; j < L; ++j) {
                const S p = pr[j];
                const S s = ds[(size_t)j];
                if (dv && p != S(0)) {
                    S* dvj = dv->ptr() + j * d + c0;
                    for (int64_t e = 0; e < dh; ++e) dvj[e] += p * doi[e];
                }
                if (s != S(0)) {
                    const S* kj = k.ptr() + j * d + c0;
                    if (dqi)
                        for (int64_t e = 0; e < dh; ++e) dqi[e] += s * scale * kj[e];
                    if (dk) {
                        S* dkj = dk->ptr() + j * d + c0;
                        for (int64_t e = 0; e < dh; ++e) dkj[e] += s * scale * qi[e];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Spatial patchify. x is (T,H,W,C), patch p by p, no temporal grouping.
// Token order is (t, gy, gx) raster; within a token the layout is (py,px,c).

template <class S>
TensorT<S> patchify_forward(const TensorT<S>& x, int64_t p) {
    check(x.shape.size() == 4, "patchify: input must be (T,H,W,C)");
    const int64_t T = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    check(H % p == 0 && W % p == 0, "patchify: spatial extent not divisible by patch size");
    const int64_t GH = H / p, GW = W / p;
    TensorT<S> out({T * GH * GW, p * p * C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t gy = 0; gy < GH; ++gy)
            for (int64_t gx = 0; gx < GW; ++gx) {
                S* tok = out.ptr() + ((t * GH + gy) * GW + gx) * p * p * C;
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px) {
                        const S* src = x.ptr() + ((t * H + gy * p + py) * W + gx * p + px) * C;
                        S* dst = tok + (py * p + px) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
                    }
            }
    return out;
}

template <class S>
TensorT<S> unpatchify_forward(const TensorT<S>& tokens, int64_t T, int64_t GH, int64_t GW,
                              int64_t p, int64_t C) {
    check(tokens.shape.size() == 2 && tokens.shape[0] == T * GH * GW &&
              tokens.shape[1] == p * p * C,
          "unpatchify: token shape mismatch");
    TensorT<S> out({T, GH * p, GW * p, C});
    const int64_t H = GH * p, W = GW * p;
    for (int64_t t = 0; t < T; ++t)
        for (int64_t gy = 0; gy < GH; ++gy)
            for (int64_t gx = 0; gx < GW; ++gx) {
                const S* tok = tokens.ptr() + ((t * GH + gy) * GW + gx) * p * p * C;
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px) {
                        const S* src = tok + (py * p + px) * C;
                        S* dst = out.ptr() + ((t * H + gy * p + py) * W + gx * p + px) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
                    }
            }
    return out;
}

// ---------------------------------------------------------------------------
// Temporal upsample mapping n frames to 2n-1: frame 0 appears once, every
// later frame twice, so output frame j only depends on input ceil(j/2) and
// earlier.

template <class S>
TensorT<S> upsample_time_causal_forward(const TensorT<S>& x) {
    check(x.shape.size() == 4, "upsample_time: input must be (T,H,W,C)");
    const int64_t T = x.shape[0];
    const int64_t plane = x.numel() / T;
    TensorT<S> out({2 * T - 1, x.shape[1], x.shape[2], x.shape[3]});
    for (int64_t j = 0; j < 2 * T - 1; ++j) {
        const int64_t i = (j + 1) / 2;
        const S* src = x.ptr() + i * plane;
        S* dst = out.ptr() + j * plane;
        for (int64_t e = 0; e < plane; ++e) dst[e] = src[e];
    }
    return out;
}

template <class S>
void upsample_time_causal_backward(const TensorT<S>& dy, TensorT<S>& dx) {
    const int64_t TO = dy.shape[0];
    const int64_t plane = dy.numel() / TO;
    for (int64_t j = 0; j < TO; ++j) {
        const int64_t i = (j + 1) / 2;
        const S* src = dy.ptr() + j * plane;
        S* dst = dx.ptr() + i * plane;
        for (int64_t e = 0; e < plane; ++e) dst[e] += src[e];
    }
}

template <class S>
TensorT<S> upsample_nearest2x_forward(const TensorT<S>& x) {
    check(x.shape.size() == 4, "upsample2x: input must be (T,H,W,C)");
    const int64_t T = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    TensorT<S> out({T, 2 * H, 2 * W, C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t x2 = 0; x2 < 2 * W; ++x2) {
                const S* src = x.ptr() + ((t * H + y / 2) * W + x2 / 2) * C;
                S* dst = out.ptr() + ((t * 2 * H + y) * 2 * W + x2) * C;
                for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
            }
    return out;
}

template <class S>
void upsample_nearest2x_backward(const TensorT<S>& dy, TensorT<S>& dx) {
    const int64_t T = dx.shape[0], H = dx.shape[1], W = dx.shape[2], C = dx.shape[3];
    for (int64_t t = 0; t < T; ++t)
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t x2 = 0; x2 < 2 * W; ++x2) {
                const S* src = dy.ptr() + ((t * 2 * H + y) * 2 * W + x2) * C;
                S* dst = dx.ptr() + ((t * H + y / 2) * W + x2 / 2) * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
}

}  // namespace dv

#endif
