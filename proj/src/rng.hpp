#ifndef DV_RNG_HPP
#define DV_RNG_HPP

#include <cstdint>
#include <cmath>

#include "tensor.hpp"

namespace dv {

// Deterministic stream generator: splitmix64 state advance. Integer state
// transitions are exact on every platform; float draws are derived from the
// top 53 bits so the stream is reproducible bit-for-bit for a given seed.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0,1)
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    // inclusive [lo, hi]
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = (uint64_t)(hi - lo + 1);
        return lo + (int64_t)(next_u64() % span);
    }

    // Box-Muller, two uniforms per draw (no cached second value so the
    // stream position is a pure function of the draw count).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    // Derived stream key: mixes (seed, k) through one splitmix step.
    static uint64_t hash_stream(uint64_t seed, uint64_t k) {
        Rng r(seed ^ (k * 0x632be59bd9b4e019ull + 0x9e3779b97f4a7c15ull));
        return r.next_u64();
    }

private:
    uint64_t state_;
};

template <class S>
inline TensorT<S> randn(Rng& rng, std::vector<int64_t> shape, double stddev = 1.0) {
    TensorT<S> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (S)(rng.normal() * stddev);
    return t;
}

template <class S>
inline TensorT<S> rand_uniform(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
    TensorT<S> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (S)(lo + rng.uniform() * (hi - lo));
    return t;
}

}  // namespace dv

#endif
