#ifndef DV_ROPE_HPP
#define DV_ROPE_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace dv {

// Rotary tables for 3D coordinates. Head channels split into an x block, a
// y block and a t block sized 3/8, 3/8 and 2/8 of head_dim; each block gets
// standard 1D rotary angles theta_j = base^(-2j/d_axis) driven by its
// coordinate. head_dim must be a multiple of 16 so all blocks are even.
struct RopeTable {
    int64_t dh = 0;
    int64_t dx = 0, dy = 0, dt = 0;
    double base = 10000.0;
    std::vector<double> theta_x, theta_y, theta_t;
    // training-grid extents; coordinates at or beyond these are
    // extrapolation and get counted when angles are built
    int64_t extent_t = 0, extent_y = 0, extent_x = 0;
    mutable int64_t extrapolation_events = 0;
};

inline RopeTable make_rope_table(int64_t head_dim, int64_t extent_t, int64_t extent_y,
                                 int64_t extent_x, double base = 10000.0) {
    check(head_dim % 16 == 0, "rope: head_dim must be a multiple of 16");
    RopeTable tab;
    tab.dh = head_dim;
    tab.dx = 3 * head_dim / 8;
    tab.dy = 3 * head_dim / 8;
    tab.dt = head_dim - tab.dx - tab.dy;
    tab.base = base;
    tab.extent_t = extent_t;
    tab.extent_y = extent_y;
    tab.extent_x = extent_x;
    auto fill = [base](std::vector<double>& v, int64_t d_axis) {
        v.resize((size_t)(d_axis / 2));
        for (int64_t j = 0; j < d_axis / 2; ++j)
            v[(size_t)j] = std::pow(base, -2.0 * (double)j / (double)d_axis);
    };
    fill(tab.theta_x, tab.dx);
    fill(tab.theta_y, tab.dy);
    fill(tab.theta_t, tab.dt);
    return tab;
}

// Builds per-token cos/sin tables of shape (L, dh/2) for the graph rope op.
// Text and padding tokens (is_vision 0) get identity rows. Coordinate
// scales below 1 implement interpolation onto a larger grid; with scales of
// 1 the angles of in-grid coordinates are untouched and out-of-grid ones
// extrapolate (counted on the table).
inline void rope_angles(const RopeTable& tab, const std::vector<std::array<int64_t, 3>>& coords,
                        const std::vector<uint8_t>& is_vision, double scale_t, double scale_y,
                        double scale_x, Tensor* cos_out, Tensor* sin_out) {
    const int64_t L = (int64_t)coords.size();
    check((int64_t)is_vision.size() == L, "rope_angles: flag size mismatch");
    const int64_t half = tab.dh / 2;
    Tensor cs({L, half}), sn({L, half});
    for (int64_t l = 0; l < L; ++l) {
        float* cr = cs.ptr() + l * half;
        float* sr = sn.ptr() + l * half;
        if (!is_vision[(size_t)l]) {
            for (int64_t j = 0; j < half; ++j) {
                cr[j] = 1.0f;
                sr[j] = 0.0f;
            }
            continue;
        }
        const auto& c = coords[(size_t)l];
        if (c[0] >= tab.extent_t || c[1] >= tab.extent_y || c[2] >= tab.extent_x)
            ++tab.extrapolation_events;
        const double ct = (double)c[0] * scale_t;
        const double cy = (double)c[1] * scale_y;
        const double cx = (double)c[2] * scale_x;
        int64_t p = 0;
        for (int64_t j = 0; j < tab.dx / 2; ++j, ++p) {
            const double a = cx * tab.theta_x[(size_t)j];
            cr[p] = (float)std::cos(a);
            sr[p] = (float)std::sin(a);
        }
        for (int64_t j = 0; j < tab.dy / 2; ++j, ++p) {
            const double a = cy * tab.theta_y[(size_t)j];
            cr[p] = (float)std::cos(a);
            sr[p] = (float)std::sin(a);
        }
        for (int64_t j = 0; j < tab.dt / 2; ++j, ++p) {
            const double a = ct * tab.theta_t[(size_t)j];
            cr[p] = (float)std::cos(a);
            sr[p] = (float)std::sin(a);
        }
    }
    *cos_out = std::move(cs);
    *sin_out = std::move(sn);
}

// Fixed sinusoidal embedding, interleaved sin/cos: position 0 maps to
// (0,1,0,1,...). Shared by the timestep embedding and the absolute
// positional baseline.
inline Tensor sinusoidal_embedding(double pos, int64_t dim, double base = 10000.0) {
    check(dim % 2 == 0, "sinusoidal: dim must be even");
    Tensor e({dim});
    for (int64_t i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(base, -2.0 * (double)i / (double)dim);
        e[2 * i] = (float)std::sin(pos * freq);
        e[2 * i + 1] = (float)std::cos(pos * freq);
    }
    return e;
}

}  // namespace dv

#endif
