#ifndef DV_SYNTHDATA_HPP
#define DV_SYNTHDATA_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

// Synthetic moving-shape clips: one colored shape per clip translating at a
// constant integer velocity over a black background, plus per-clip additive
// noise whose level doubles as a quality score for fine-tune subsetting.
// Every clip is a pure function of (spec, clip index), so datasets never
// need to be stored to be reproduced.

namespace dv {

// caption token ids; 0 is reserved for padding
constexpr int64_t kPadToken = 0;
constexpr int64_t kBosToken = 1;
constexpr int64_t kNullToken = 2;  // caption dropout target
constexpr int64_t kColorBase = 3;
constexpr int64_t kShapeBase = 9;
constexpr int64_t kMotionBase = 12;

inline const char* const kColorNames[6] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
inline const float kColorRgb[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                      {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};
inline const char* const kShapeNames[3] = {"square", "circle", "triangle"};
inline const char* const kMotionNames[5] = {"left", "right", "up", "down", "static"};

struct SynthSpec {
    int64_t num_clips = 512;
    std::vector<int64_t> frame_lengths = {1, 5, 9, 13, 17};
    int64_t size = 32;
    uint64_t seed = 42;
};

struct Clip {
    Tensor video;  // (T, S, S, 3) in [0, 1]
    std::vector<int64_t> caption;
    int shape = 0, color = 0, motion = 0;
    float noise_level = 0;
    int64_t start_x = 0, start_y = 0, speed = 0;
};

inline bool shape_hit(int shape, int64_t dx, int64_t dy, int64_t half) {
    switch (shape) {
        case 0: return std::abs(dx) <= half && std::abs(dy) <= half;
        case 1: return dx * dx + dy * dy <= half * half;
        default:  // triangle, apex up
            return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2;
    }
}

inline Clip make_clip(const SynthSpec& spec, int64_t index) {
    Rng rng(Rng::hash_stream(spec.seed, static_cast<uint64_t>(index)));
    Clip c;
    c.shape = static_cast<int>(rng.uniform_int(0, 2));
    c.color = static_cast<int>(rng.uniform_int(0, 5));
    c.motion = static_cast<int>(rng.uniform_int(0, 4));
    const int64_t T =
        spec.frame_lengths[(size_t)rng.uniform_int(0, (int64_t)spec.frame_lengths.size() - 1)];
    c.noise_level = static_cast<float>(0.05 * rng.uniform());
    c.caption = {kBosToken, kColorBase + c.color, kShapeBase + c.shape, kMotionBase + c.motion};

    const int64_t S = spec.size;
    const int64_t half = S / 8;
    const int64_t margin = half + 1;
    const int64_t span = S - 1 - 2 * margin;  // admissible start-position range

    // fastest integer speed whose full trajectory stays inside the frame
    c.speed = c.motion == 4 || T == 1 ? 0 : std::max<int64_t>(1, std::min<int64_t>(2, span / (T - 1)));
    int64_t vx = 0, vy = 0;
    if (c.motion == 0) vx = -c.speed;
    if (c.motion == 1) vx = c.speed;
    if (c.motion == 2) vy = -c.speed;
    if (c.motion == 3) vy = c.speed;

    const int64_t travel = c.speed * (T - 1);
    const int64_t x_lo = margin + (vx < 0 ? travel : 0);
    const int64_t x_hi = margin + span - (vx > 0 ? travel : 0);
    const int64_t y_lo = margin + (vy < 0 ? travel : 0);
    const int64_t y_hi = margin + span - (vy > 0 ? travel : 0);
    c.start_x = rng.uniform_int(x_lo, x_hi);
    c.start_y = rng.uniform_int(y_lo, y_hi);

    c.video = Tensor({T, S, S, 3});
    for (int64_t t = 0; t < T; ++t) {
        const int64_t cx = c.start_x + vx * t;
        const int64_t cy = c.start_y + vy * t;
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                const bool hit = shape_hit(c.shape, x - cx, y - cy, half);
                for (int64_t ch = 0; ch < 3; ++ch) {
                    float v = hit ? kColorRgb[c.color][ch] : 0.0f;
                    v += c.noise_level * static_cast<float>(rng.normal());
                    c.video.at4(t, y, x, ch) = std::clamp(v, 0.0f, 1.0f);
                }
            }
    }
    return c;
}

inline std::vector<Clip> make_clips(const SynthSpec& spec) {
    std::vector<Clip> clips;
    clips.reserve(static_cast<size_t>(spec.num_clips));
    for (int64_t i = 0; i < spec.num_clips; ++i) clips.push_back(make_clip(spec, i));
    return clips;
}

// On-disk layout: manifest.csv plus one raw little-endian f32 file and one
// token text file per clip.
inline void write_dataset(const std::string& dir, const SynthSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    if (spec.num_clips > 0) fs::create_directories(dir + "/clips");
    FILE* mf = std::fopen((dir + "/manifest.csv").c_str(), "w");
    check(mf != nullptr, "gen-data: cannot write manifest in " + dir);
    std::fprintf(mf, "clip,frames,size,shape,color,motion,noise_level,video,caption\n");
    for (int64_t i = 0; i < spec.num_clips; ++i) {
        const Clip c = make_clip(spec, i);
        char base[32];
        std::snprintf(base, sizeof base, "clips/clip_%05lld", static_cast<long long>(i));
        const std::string vfile = std::string(base) + ".f32";
        const std::string tfile = std::string(base) + ".tok";
        std::fprintf(mf, "%lld,%lld,%lld,%s,%s,%s,%.9g,%s,%s\n", static_cast<long long>(i),
                     static_cast<long long>(c.video.shape[0]), static_cast<long long>(spec.size),
                     kShapeNames[c.shape], kColorNames[c.color], kMotionNames[c.motion],
                     c.noise_level, vfile.c_str(), tfile.c_str());

        FILE* vf = std::fopen((dir + "/" + vfile).c_str(), "wb");
        check(vf != nullptr, "gen-data: cannot write " + vfile);
        std::fwrite(c.video.ptr(), sizeof(float), static_cast<size_t>(c.video.numel()), vf);
        std::fclose(vf);

        FILE* tf = std::fopen((dir + "/" + tfile).c_str(), "w");
        check(tf != nullptr, "gen-data: cannot write " + tfile);
        for (size_t k = 0; k < c.caption.size(); ++k)
            std::fprintf(tf, "%s%lld", k ? " " : "", static_cast<long long>(c.caption[k]));
        std::fprintf(tf, "\n");
        std::fclose(tf);
    }
    std::fclose(mf);
}

// Parses a prompt like "red square right" into the caption token layout.
inline std::vector<int64_t> tokenize_prompt(const std::string& prompt) {
    std::vector<int64_t> caption = {kBosToken, kNullToken, kNullToken, kNullToken};
    std::string word;
    std::istringstream in(prompt);
    while (in >> word) {
        bool known = false;
        for (int i = 0; i < 6; ++i)
            if (word == kColorNames[i]) caption[1] = kColorBase + i, known = true;
        for (int i = 0; i < 3; ++i)
            if (word == kShapeNames[i]) caption[2] = kShapeBase + i, known = true;
        for (int i = 0; i < 5; ++i)
            if (word == kMotionNames[i]) caption[3] = kMotionBase + i, known = true;
        check(known, "prompt: unknown word " + word);
    }
    return caption;
}

}  // namespace dv

#endif  // DV_SYNTHDATA_HPP
