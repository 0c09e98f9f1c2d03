#ifndef DV_GRAPH_HPP
#define DV_GRAPH_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "conv3d.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace dv {

// Reverse-mode tape. Every op appends a node holding the forward value and a
// backward closure; backward() walks the tape in reverse creation order, so
// gradient accumulation order is fixed and runs are reproducible bit for bit.
template <class S>
class GraphT {
  public:
    struct Node {
        TensorT<S> val;
        TensorT<S> grad;
        bool rg = false;
        bool grad_alloc = false;
        std::function<void()> back;
    };

    GraphT() = default;
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    std::vector<Node> nodes;

    int input(TensorT<S> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad);
    }

    const TensorT<S>& val(int id) const { return nodes[(size_t)id].val; }

    // Zero-initialized on first touch so unused parameters read back as zero.
    TensorT<S>& grad(int id) { return ensure_grad(id); }

    bool has_grad(int id) const { return nodes[(size_t)id].grad_alloc; }

    void backward(int loss) {
        check(nodes[(size_t)loss].val.numel() == 1, "backward: loss must be scalar");
        ensure_grad(loss).fill(S(1));
        for (int id = loss; id >= 0; --id) {
            Node& n = nodes[(size_t)id];
            if (n.grad_alloc && n.back) n.back();
        }
    }

    // ----- elementwise -----

    int add(int a, int b) {
        check(val(a).same_shape(val(b)), "add: shape mismatch");
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] += val(b)[i];
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, id] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(a)) {
                auto& da = ensure_grad(a);
                for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
            }
            if (rg(b)) {
                auto& db = ensure_grad(b);
                for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i];
            }
        };
        return id;
    }

    int sub(int a, int b) {
        check(val(a).same_shape(val(b)), "sub: shape mismatch");
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] -= val(b)[i];
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, id] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(a)) {
                auto& da = ensure_grad(a);
                for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
            }
            if (rg(b)) {
                auto& db = ensure_grad(b);
                for (int64_t i = 0; i < dy.numel(); ++i) db[i] -= dy[i];
            }
        };
        return id;
    }

    int mul(int a, int b) {
        check(val(a).same_shape(val(b)), "mul: shape mismatch");
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] *= val(b)[i];
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, id] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(a)) {
                auto& da = ensure_grad(a);
                const auto& vb = val(b);
                for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * vb[i];
            }
            if (rg(b)) {
                auto& db = ensure_grad(b);
                const auto& va = val(a);
                for (int64_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * va[i];
            }
        };
        return id;
    }

    int scale(int a, S c) {
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] *= c;
        int id = push(std::move(y), rg(a));
        nodes[(size_t)id].back = [this, a, c, id] {
            if (!rg(a)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& da = ensure_grad(a);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * c;
        };
        return id;
    }

    int add_const(int a, S c) {
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] += c;
        int id = push(std::move(y), rg(a));
        nodes[(size_t)id].back = [this, a, id] {
            if (!rg(a)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& da = ensure_grad(a);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        };
        return id;
    }

    int relu(int a) {
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i)
            if (y[i] < S(0)) y[i] = S(0);
        int id = push(std::move(y), rg(a));
        nodes[(size_t)id].back = [this, a, id] {
            if (!rg(a)) return;
            const auto& dy = nodes[(size_t)id].grad;
            const auto& va = val(a);
            auto& da = ensure_grad(a);
            for (int64_t i = 0; i < dy.numel(); ++i)
                if (va[i] > S(0)) da[i] += dy[i];
        };
        return id;
    }

    int silu(int a) {
        TensorT<S> y = val(a);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = silu_val(y[i]);
        int id = push(std::move(y), rg(a));
        nodes[(size_t)id].back = [this, a, id] {
            if (!rg(a)) return;
            const auto& dy = nodes[(size_t)id].grad;
            const auto& va = val(a);
            auto& da = ensure_grad(a);
            for (int64_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * silu_grad(va[i]);
        };
        return id;
    }

    // ----- linear algebra -----

    // x (..., din) times W (din, dout), plus optional bias (dout). Leading
    // axes are treated as rows.
    int linear(int x, int w, int b = -1) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        check(wv.rank() == 2, "linear: W must be (din,dout)");
        const int64_t din = wv.shape[0], dout = wv.shape[1];
        check(xv.shape.back() == din, "linear: input width mismatch");
        const int64_t rows = xv.numel() / din;
        std::vector<int64_t> osh = xv.shape;
        osh.back() = dout;
        TensorT<S> y(osh);
        const bool has_b = b >= 0;
        if (has_b) check(val(b).numel() == dout, "linear: bias size mismatch");
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = xv.ptr() + r * din;
            S* yr = y.ptr() + r * dout;
            if (has_b) {
                const S* bp = val(b).ptr();
                for (int64_t j = 0; j < dout; ++j) yr[j] = bp[j];
            }
            for (int64_t i = 0; i < din; ++i) {
                const S a = xr[i];
                if (a == S(0)) continue;
                const S* wr = wv.ptr() + i * dout;
                for (int64_t j = 0; j < dout; ++j) yr[j] += a * wr[j];
            }
        }
        int id = push(std::move(y), rg(x) || rg(w) || (has_b && rg(b)));
        nodes[(size_t)id].back = [this, x, w, b, id, rows, din, dout] {
            const auto& dy = nodes[(size_t)id].grad;
            const auto& xv2 = val(x);
            const auto& wv2 = val(w);
            if (rg(x)) {
                auto& dx = ensure_grad(x);
                for (int64_t r = 0; r < rows; ++r) {
                    const S* gr = dy.ptr() + r * dout;
                    S* dxr = dx.ptr() + r * din;
                    for (int64_t i = 0; i < din; ++i) {
                        const S* wr = wv2.ptr() + i * dout;
                        S acc = 0;
                        for (int64_t j = 0; j < dout; ++j) acc += gr[j] * wr[j];
                        dxr[i] += acc;
                    }
                }
            }
            if (rg(w)) {
                auto& dw = ensure_grad(w);
                for (int64_t r = 0; r < rows; ++r) {
                    const S* gr = dy.ptr() + r * dout;
                    const S* xr = xv2.ptr() + r * din;
                    for (int64_t i = 0; i < din; ++i) {
                        const S a = xr[i];
                        if (a == S(0)) continue;
                        S* dwr = dw.ptr() + i * dout;
                        for (int64_t j = 0; j < dout; ++j) dwr[j] += a * gr[j];
                    }
                }
            }
            if (b >= 0 && rg(b)) {
                auto& db = ensure_grad(b);
                for (int64_t r = 0; r < rows; ++r) {
                    const S* gr = dy.ptr() + r * dout;
                    for (int64_t j = 0; j < dout; ++j) db[j] += gr[j];
                }
            }
        };
        return id;
    }

    int conv3d(int x, int w, int b, const Conv3dSpec& spec) {
        static const TensorT<S> kNoBias;
        const TensorT<S>& bias = b >= 0 ? val(b) : kNoBias;
        TensorT<S> y = conv3d_forward(val(x), val(w), bias, spec);
        int id = push(std::move(y), rg(x) || rg(w) || (b >= 0 && rg(b)));
        Conv3dSpec sp = spec;
        nodes[(size_t)id].back = [this, x, w, b, id, sp] {
            const auto& dy = nodes[(size_t)id].grad;
            TensorT<S>* din = rg(x) ? &ensure_grad(x) : nullptr;
            TensorT<S>* dw = rg(w) ? &ensure_grad(w) : nullptr;
            TensorT<S>* db = (b >= 0 && rg(b)) ? &ensure_grad(b) : nullptr;
            conv3d_backward(val(x), val(w), sp, dy, din, dw, db);
        };
        return id;
    }

    // ----- normalization -----

    int layernorm(int x, S eps) {
        TensorT<S> y = layernorm_forward(val(x), eps);
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, eps, id] {
            if (!rg(x)) return;
            layernorm_backward(val(x), eps, nodes[(size_t)id].grad, ensure_grad(x));
        };
        return id;
    }

    int groupnorm_frame(int x, int64_t group_channels, S eps, int gamma, int beta) {
        TensorT<S> y = groupnorm_frame_forward(val(x), group_channels, eps, val(gamma), val(beta));
        int id = push(std::move(y), rg(x) || rg(gamma) || rg(beta));
        nodes[(size_t)id].back = [this, x, gamma, beta, group_channels, eps, id] {
            const auto& dy = nodes[(size_t)id].grad;
            TensorT<S>* dx = rg(x) ? &ensure_grad(x) : nullptr;
            TensorT<S>* dg = rg(gamma) ? &ensure_grad(gamma) : nullptr;
            TensorT<S>* db = rg(beta) ? &ensure_grad(beta) : nullptr;
            groupnorm_frame_backward(val(x), group_channels, eps, val(gamma), dy, dx, dg, db);
        };
        return id;
    }

    // ----- attention and rotary embedding -----

    int attention(int q, int k, int v, int64_t n_heads, TensorT<S> mask) {
        auto probs = std::make_shared<TensorT<S>>();
        TensorT<S> y = attention_forward(val(q), val(k), val(v), n_heads, mask, probs.get());
        int id = push(std::move(y), rg(q) || rg(k) || rg(v));
        nodes[(size_t)id].back = [this, q, k, v, n_heads, probs, id] {
            const auto& dy = nodes[(size_t)id].grad;
            TensorT<S>* dq = rg(q) ? &ensure_grad(q) : nullptr;
            TensorT<S>* dk = rg(k) ? &ensure_grad(k) : nullptr;
            TensorT<S>* dv = rg(v) ? &ensure_grad(v) : nullptr;
            attention_backward(val(q), val(k), val(v), n_heads, *probs, dy, dq, dk, dv);
        };
        return id;
    }

    // Rotates consecutive channel pairs within each head slice by per-token
    // angles given as cos/sin tables of shape (L, dh/2). Identity rows
    // (cos 1, sin 0) leave a token unrotated.
    int rope(int x, int64_t n_heads, TensorT<S> cos_t, TensorT<S> sin_t) {
        const auto& xv = val(x);
        check(xv.rank() == 2, "rope: input must be (L,d)");
        const int64_t L = xv.shape[0], d = xv.shape[1];
        const int64_t dh = d / n_heads;
        check(dh % 2 == 0, "rope: head dim must be even");
        check(cos_t.shape == std::vector<int64_t>({L, dh / 2}) && sin_t.same_shape(cos_t),
              "rope: angle table shape mismatch");
        TensorT<S> y(xv.shape);
        for (int64_t l = 0; l < L; ++l) {
            const S* cr = cos_t.ptr() + l * (dh / 2);
            const S* sr = sin_t.ptr() + l * (dh / 2);
            const S* xr = xv.ptr() + l * d;
            S* yr = y.ptr() + l * d;
            for (int64_t h = 0; h < n_heads; ++h) {
                const int64_t c0 = h * dh;
                for (int64_t j = 0; j < dh / 2; ++j) {
                    const S c = cr[j], s = sr[j];
                    const S x0 = xr[c0 + 2 * j], x1 = xr[c0 + 2 * j + 1];
                    yr[c0 + 2 * j] = c * x0 - s * x1;
                    yr[c0 + 2 * j + 1] = s * x0 + c * x1;
                }
            }
        }
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, n_heads, cos_t, sin_t, id, L, d, dh] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& dx = ensure_grad(x);
            for (int64_t l = 0; l < L; ++l) {
                const S* cr = cos_t.ptr() + l * (dh / 2);
                const S* sr = sin_t.ptr() + l * (dh / 2);
                const S* gr = dy.ptr() + l * d;
                S* dr = dx.ptr() + l * d;
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t c0 = h * dh;
                    for (int64_t j = 0; j < dh / 2; ++j) {
                        const S c = cr[j], s = sr[j];
                        const S g0 = gr[c0 + 2 * j], g1 = gr[c0 + 2 * j + 1];
                        dr[c0 + 2 * j] += c * g0 + s * g1;
                        dr[c0 + 2 * j + 1] += -s * g0 + c * g1;
                    }
                }
            }
        };
        return id;
    }

    // ----- row and channel plumbing -----

    int gather_rows(int x, std::vector<int64_t> idx) {
        const auto& xv = val(x);
        check(xv.rank() == 2, "gather_rows: source must be (R,d)");
        const int64_t R = xv.shape[0], d = xv.shape[1];
        for (int64_t i : idx) check(i >= 0 && i < R, "gather_rows: index out of range");
        TensorT<S> y({(int64_t)idx.size(), d});
        for (size_t l = 0; l < idx.size(); ++l) {
            const S* src = xv.ptr() + idx[l] * d;
            S* dst = y.ptr() + (int64_t)l * d;
            for (int64_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, idx = std::move(idx), id, d] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& dx = ensure_grad(x);
            for (size_t l = 0; l < idx.size(); ++l) {
                const S* src = dy.ptr() + (int64_t)l * d;
                S* dst = dx.ptr() + idx[l] * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    // Row-wise choice: row l of the output comes from a when flags[l] is
    // nonzero, from b otherwise.
    int where_rows(int a, int b, std::vector<uint8_t> flags) {
        const auto& av = val(a);
        check(av.same_shape(val(b)), "where_rows: shape mismatch");
        check(av.rank() == 2 && (int64_t)flags.size() == av.shape[0],
              "where_rows: flag count mismatch");
        const int64_t L = av.shape[0], d = av.shape[1];
        TensorT<S> y(av.shape);
        for (int64_t l = 0; l < L; ++l) {
            const S* src = (flags[(size_t)l] ? av.ptr() : val(b).ptr()) + l * d;
            S* dst = y.ptr() + l * d;
            for (int64_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, flags = std::move(flags), id, L, d] {
            const auto& dy = nodes[(size_t)id].grad;
            for (int64_t l = 0; l < L; ++l) {
                const int p = flags[(size_t)l] ? a : b;
                if (!rg(p)) continue;
                S* dst = ensure_grad(p).ptr() + l * d;
                const S* src = dy.ptr() + l * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    int add_rowvec(int x, int v) {
        const auto& xv = val(x);
        const int64_t d = xv.shape.back();
        check(val(v).numel() == d, "add_rowvec: vector size mismatch");
        const int64_t rows = xv.numel() / d;
        TensorT<S> y = xv;
        for (int64_t r = 0; r < rows; ++r) {
            S* yr = y.ptr() + r * d;
            const S* vp = val(v).ptr();
            for (int64_t j = 0; j < d; ++j) yr[j] += vp[j];
        }
        int id = push(std::move(y), rg(x) || rg(v));
        nodes[(size_t)id].back = [this, x, v, id, rows, d] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(x)) {
                auto& dx = ensure_grad(x);
                for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
            }
            if (rg(v)) {
                auto& dv = ensure_grad(v);
                for (int64_t r = 0; r < rows; ++r) {
                    const S* gr = dy.ptr() + r * d;
                    for (int64_t j = 0; j < d; ++j) dv[j] += gr[j];
                }
            }
        };
        return id;
    }

    int mul_rowvec(int x, int v) {
        const auto& xv = val(x);
        const int64_t d = xv.shape.back();
        check(val(v).numel() == d, "mul_rowvec: vector size mismatch");
        const int64_t rows = xv.numel() / d;
        TensorT<S> y = xv;
        for (int64_t r = 0; r < rows; ++r) {
            S* yr = y.ptr() + r * d;
            const S* vp = val(v).ptr();
            for (int64_t j = 0; j < d; ++j) yr[j] *= vp[j];
        }
        int id = push(std::move(y), rg(x) || rg(v));
        nodes[(size_t)id].back = [this, x, v, id, rows, d] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(x)) {
                auto& dx = ensure_grad(x);
                const S* vp = val(v).ptr();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) dx[r * d + j] += dy[r * d + j] * vp[j];
            }
            if (rg(v)) {
                auto& dv = ensure_grad(v);
                const auto& xv2 = val(x);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) dv[j] += dy[r * d + j] * xv2[r * d + j];
            }
        };
        return id;
    }

    int slice_rows(int x, int64_t r0, int64_t r1) {
        const auto& xv = val(x);
        check(xv.rank() == 2, "slice_rows: input must be (L,d)");
        check(0 <= r0 && r0 < r1 && r1 <= xv.shape[0], "slice_rows: bad range");
        const int64_t d = xv.shape[1];
        TensorT<S> y({r1 - r0, d});
        for (int64_t r = r0; r < r1; ++r)
            for (int64_t j = 0; j < d; ++j) y[(r - r0) * d + j] = xv[r * d + j];
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, r0, r1, id, d] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& dx = ensure_grad(x);
            for (int64_t r = r0; r < r1; ++r)
                for (int64_t j = 0; j < d; ++j) dx[r * d + j] += dy[(r - r0) * d + j];
        };
        return id;
    }

    int concat_rows(const std::vector<int>& parts) {
        check(!parts.empty(), "concat_rows: empty part list");
        const int64_t d = val(parts[0]).shape.back();
        int64_t rows = 0;
        bool any_rg = false;
        for (int p : parts) {
            check(val(p).rank() == 2 && val(p).shape[1] == d, "concat_rows: width mismatch");
            rows += val(p).shape[0];
            any_rg = any_rg || rg(p);
        }
        TensorT<S> y({rows, d});
        int64_t at = 0;
        for (int p : parts) {
            const auto& pv = val(p);
            for (int64_t i = 0; i < pv.numel(); ++i) y[at * d + i] = pv[i];
            at += pv.shape[0];
        }
        int id = push(std::move(y), any_rg);
        std::vector<int> parts_c = parts;
        nodes[(size_t)id].back = [this, parts_c, id, d] {
            const auto& dy = nodes[(size_t)id].grad;
            int64_t at = 0;
            for (int p : parts_c) {
                const int64_t n = val(p).numel();
                if (rg(p)) {
                    auto& dp = ensure_grad(p);
                    for (int64_t i = 0; i < n; ++i) dp[i] += dy[at * d + i];
                }
                at += val(p).shape[0];
            }
        };
        return id;
    }

    int slice_channels(int x, int64_t c0, int64_t c1) {
        const auto& xv = val(x);
        const int64_t C = xv.shape.back();
        check(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range");
        const int64_t rows = xv.numel() / C;
        std::vector<int64_t> osh = xv.shape;
        osh.back() = c1 - c0;
        TensorT<S> y(osh);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = c0; c < c1; ++c) y[r * (c1 - c0) + (c - c0)] = xv[r * C + c];
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, c0, c1, id, rows, C] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& dx = ensure_grad(x);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = c0; c < c1; ++c) dx[r * C + c] += dy[r * (c1 - c0) + (c - c0)];
        };
        return id;
    }

    int concat_channels(int a, int b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        check(av.rank() == bv.rank(), "concat_channels: rank mismatch");
        for (int i = 0; i + 1 < av.rank(); ++i)
            check(av.shape[(size_t)i] == bv.shape[(size_t)i], "concat_channels: dim mismatch");
        const int64_t Ca = av.shape.back(), Cb = bv.shape.back();
        const int64_t rows = av.numel() / Ca;
        std::vector<int64_t> osh = av.shape;
        osh.back() = Ca + Cb;
        TensorT<S> y(osh);
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < Ca; ++c) y[r * (Ca + Cb) + c] = av[r * Ca + c];
            for (int64_t c = 0; c < Cb; ++c) y[r * (Ca + Cb) + Ca + c] = bv[r * Cb + c];
        }
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, id, rows, Ca, Cb] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(a)) {
                auto& da = ensure_grad(a);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < Ca; ++c) da[r * Ca + c] += dy[r * (Ca + Cb) + c];
            }
            if (rg(b)) {
                auto& db = ensure_grad(b);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < Cb; ++c) db[r * Cb + c] += dy[r * (Ca + Cb) + Ca + c];
            }
        };
        return id;
    }

    int reshape(int x, std::vector<int64_t> sh) {
        TensorT<S> y = val(x).reshaped(sh);
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, id] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            auto& dx = ensure_grad(x);
            for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        };
        return id;
    }

    // ----- video token plumbing -----

    int patchify(int x, int64_t p) {
        TensorT<S> y = patchify_forward(val(x), p);
        auto ish = val(x).shape;
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, p, id, ish] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            TensorT<S> unp =
                unpatchify_forward(dy, ish[0], ish[1] / p, ish[2] / p, p, ish[3]);
            auto& dx = ensure_grad(x);
            for (int64_t i = 0; i < unp.numel(); ++i) dx[i] += unp[i];
        };
        return id;
    }

    int unpatchify(int x, int64_t T, int64_t GH, int64_t GW, int64_t p, int64_t C) {
        TensorT<S> y = unpatchify_forward(val(x), T, GH, GW, p, C);
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, p, id] {
            if (!rg(x)) return;
            const auto& dy = nodes[(size_t)id].grad;
            TensorT<S> pat = patchify_forward(dy, p);
            auto& dx = ensure_grad(x);
            for (int64_t i = 0; i < pat.numel(); ++i) dx[i] += pat[i];
        };
        return id;
    }

    int upsample_time_causal(int x) {
        TensorT<S> y = upsample_time_causal_forward(val(x));
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, id] {
            if (!rg(x)) return;
            upsample_time_causal_backward(nodes[(size_t)id].grad, ensure_grad(x));
        };
        return id;
    }

    int upsample_nearest2x(int x) {
        TensorT<S> y = upsample_nearest2x_forward(val(x));
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, id] {
            if (!rg(x)) return;
            upsample_nearest2x_backward(nodes[(size_t)id].grad, ensure_grad(x));
        };
        return id;
    }

    // ----- reductions and losses -----

    int mean_all(int x) {
        const auto& xv = val(x);
        S acc = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
        TensorT<S> y({1});
        y[0] = acc / S(xv.numel());
        int id = push(std::move(y), rg(x));
        nodes[(size_t)id].back = [this, x, id] {
            if (!rg(x)) return;
            const S g = nodes[(size_t)id].grad[0];
            auto& dx = ensure_grad(x);
            const S inv = g / S(dx.numel());
            for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += inv;
        };
        return id;
    }

    int mse(int a, int b) {
        const auto& av = val(a);
        check(av.same_shape(val(b)), "mse: shape mismatch");
        S acc = 0;
        for (int64_t i = 0; i < av.numel(); ++i) {
            S d = av[i] - val(b)[i];
            acc += d * d;
        }
        TensorT<S> y({1});
        y[0] = acc / S(av.numel());
        int id = push(std::move(y), rg(a) || rg(b));
        nodes[(size_t)id].back = [this, a, b, id] {
            const S g = nodes[(size_t)id].grad[0];
            const auto& av2 = val(a);
            const auto& bv2 = val(b);
            const S c = g * S(2) / S(av2.numel());
            if (rg(a)) {
                auto& da = ensure_grad(a);
                for (int64_t i = 0; i < av2.numel(); ++i) da[i] += c * (av2[i] - bv2[i]);
            }
            if (rg(b)) {
                auto& db = ensure_grad(b);
                for (int64_t i = 0; i < av2.numel(); ++i) db[i] -= c * (av2[i] - bv2[i]);
            }
        };
        return id;
    }

    // Mean per element of the diagonal-Gaussian KL against a unit prior:
    // 0.5 * (mu^2 + exp(logvar) - 1 - logvar).
    int kl_mean(int mu, int logvar) {
        const auto& mv = val(mu);
        check(mv.same_shape(val(logvar)), "kl_mean: shape mismatch");
        S acc = 0;
        for (int64_t i = 0; i < mv.numel(); ++i) {
            S m = mv[i], lv = val(logvar)[i];
            acc += S(0.5) * (m * m + std::exp(lv) - S(1) - lv);
        }
        TensorT<S> y({1});
        y[0] = acc / S(mv.numel());
        int id = push(std::move(y), rg(mu) || rg(logvar));
        nodes[(size_t)id].back = [this, mu, logvar, id] {
            const S g = nodes[(size_t)id].grad[0];
            const auto& mv2 = val(mu);
            const auto& lv2 = val(logvar);
            const S c = g / S(mv2.numel());
            if (rg(mu)) {
                auto& dm = ensure_grad(mu);
                for (int64_t i = 0; i < mv2.numel(); ++i) dm[i] += c * mv2[i];
            }
            if (rg(logvar)) {
                auto& dl = ensure_grad(logvar);
                for (int64_t i = 0; i < lv2.numel(); ++i)
                    dl[i] += c * S(0.5) * (std::exp(lv2[i]) - S(1));
            }
        };
        return id;
    }

    // z = mu + exp(0.5*logvar) * eps with eps held fixed.
    int reparam(int mu, int logvar, TensorT<S> eps) {
        const auto& mv = val(mu);
        check(mv.same_shape(val(logvar)) && mv.same_shape(eps), "reparam: shape mismatch");
        TensorT<S> y(mv.shape);
        for (int64_t i = 0; i < mv.numel(); ++i)
            y[i] = mv[i] + std::exp(S(0.5) * val(logvar)[i]) * eps[i];
        int id = push(std::move(y), rg(mu) || rg(logvar));
        nodes[(size_t)id].back = [this, mu, logvar, eps = std::move(eps), id] {
            const auto& dy = nodes[(size_t)id].grad;
            if (rg(mu)) {
                auto& dm = ensure_grad(mu);
                for (int64_t i = 0; i < dy.numel(); ++i) dm[i] += dy[i];
            }
            if (rg(logvar)) {
                auto& dl = ensure_grad(logvar);
                const auto& lv2 = val(logvar);
                for (int64_t i = 0; i < dy.numel(); ++i)
                    dl[i] += dy[i] * S(0.5) * std::exp(S(0.5) * lv2[i]) * eps[i];
            }
        };
        return id;
    }

  private:
    bool rg(int id) const { return nodes[(size_t)id].rg; }

    TensorT<S>& ensure_grad(int id) {
        Node& n = nodes[(size_t)id];
        if (!n.grad_alloc) {
            n.grad = TensorT<S>(n.val.shape);
            n.grad_alloc = true;
        }
        return n.grad;
    }

    int push(TensorT<S> v, bool requires_grad) {
        Node n;
        n.val = std::move(v);
        n.rg = requires_grad;
        nodes.push_back(std::move(n));
        return (int)nodes.size() - 1;
    }
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

}  // namespace dv

#endif
