#ifndef DV_METRICS_HPP
#define DV_METRICS_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "tensor.hpp"

// Video quality probes for sampled clips, plus PPM frame io. The centroid
// uses squared luminance as the weight so a bright shape dominates dim
// background noise even on blurry reconstructions.

namespace dv {

// mean over consecutive frame pairs of the mean squared pixel difference;
// single-frame videos score 0
inline double temporal_smoothness(const Tensor& video) {
    check(video.rank() == 4, "metrics: video must be (T,H,W,C)");
    const int64_t T = video.shape[0];
    if (T < 2) return 0.0;
    const int64_t n = video.numel() / T;
    double total = 0;
    for (int64_t t = 0; t + 1 < T; ++t) {
        const float* a = video.ptr() + t * n;
        const float* b = a + n;
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = (double)b[i] - (double)a[i];
            acc += d * d;
        }
        total += acc / (double)n;
    }
    return total / (double)(T - 1);
}

inline double centroid_x(const Tensor& video, int64_t t) {
    const int64_t H = video.shape[1], W = video.shape[2], C = video.shape[3];
    double wsum = 0, xsum = 0;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double lum = 0;
            for (int64_t c = 0; c < C; ++c) lum += video.at4(t, y, x, c);
            const double w = lum * lum;
            wsum += w;
            xsum += w * (double)x;
        }
    return wsum > 0 ? xsum / wsum : (double)W / 2.0;
}

inline std::vector<double> centroid_track_x(const Tensor& video) {
    std::vector<double> track((size_t)video.shape[0]);
    for (int64_t t = 0; t < video.shape[0]; ++t) track[(size_t)t] = centroid_x(video, t);
    return track;
}

// mean frame-to-frame centroid displacement along x, in pixels per frame
inline double mean_x_velocity(const Tensor& video) {
    const auto track = centroid_track_x(video);
    if (track.size() < 2) return 0.0;
    return (track.back() - track.front()) / (double)(track.size() - 1);
}

inline void write_ppm(const std::string& path, const Tensor& video, int64_t t) {
    check(video.rank() == 4 && video.shape[3] == 3, "ppm: frame must have 3 channels");
    const int64_t H = video.shape[1], W = video.shape[2];
    FILE* f = std::fopen(path.c_str(), "wb");
    check(f != nullptr, "ppm: cannot open " + path);
    std::fprintf(f, "P6\n%lld %lld\n255\n", (long long)W, (long long)H);
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(video.at4(t, y, x, c), 0.0f, 1.0f);
                const unsigned char byte = (unsigned char)(v * 255.0f + 0.5f);
                std::fwrite(&byte, 1, 1, f);
            }
    std::fclose(f);
}

// single P6 frame as a (1,H,W,3) tensor in [0,1]
inline Tensor load_ppm(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    check(f != nullptr, "ppm: cannot open " + path);
    char magic[3] = {};
    int w = 0, h = 0, maxval = 0;
    const int got = std::fscanf(f, "%2s %d %d %d", magic, &w, &h, &maxval);
    if (got != 4 || std::string(magic) != "P6" || w <= 0 || h <= 0 || maxval != 255) {
        std::fclose(f);
        check(false, "ppm: unsupported file " + path);
    }
    std::fgetc(f);  // single whitespace after header
    Tensor out({1, h, w, 3});
    std::vector<unsigned char> row((size_t)w * 3);
    for (int64_t y = 0; y < h; ++y) {
        const size_t n = std::fread(row.data(), 1, row.size(), f);
        if (n != row.size()) {
            std::fclose(f);
            check(false, "ppm: truncated file " + path);
        }
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                out.at4(0, y, x, c) = (float)row[(size_t)(x * 3 + c)] / 255.0f;
    }
    std::fclose(f);
    return out;
}

}  // namespace dv

#endif  // DV_METRICS_HPP
