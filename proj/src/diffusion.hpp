#ifndef DV_DIFFUSION_HPP
#define DV_DIFFUSION_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace dv {

// Noise schedule over t = 1..T with a[0] = 1, s[0] = 0 for the clean end.
// a[t] = sqrt(alpha_bar_t) after the zero-terminal rescale, s[t] =
// sqrt(1 - a[t]^2). Stored in double; consumers cast per element.
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> a;
    std::vector<double> s;
};

// Betas interpolate linearly in sqrt between the endpoints, alpha_bar is the
// running product of (1 - beta), and sqrt(alpha_bar) is rescaled as
// a'_t = a_1 * (a_t - a_T) / (a_1 - a_T), which forces a_T to exactly zero
// while leaving a_1 untouched.
inline NoiseSchedule build_schedule(int64_t T_diff, double beta_lo = 0.00085,
                                    double beta_hi = 0.012) {
    check(T_diff >= 2, "schedule: T_diff must be >= 2");
    NoiseSchedule ns;
    ns.T = T_diff;
    ns.a.assign((size_t)T_diff + 1, 0.0);
    ns.s.assign((size_t)T_diff + 1, 0.0);
    const double r_lo = std::sqrt(beta_lo), r_hi = std::sqrt(beta_hi);
    double abar = 1.0;
    std::vector<double> raw((size_t)T_diff + 1, 1.0);
    for (int64_t t = 1; t <= T_diff; ++t) {
        const double r = r_lo + (r_hi - r_lo) * (double)(t - 1) / (double)(T_diff - 1);
        abar *= 1.0 - r * r;
        raw[(size_t)t] = std::sqrt(abar);
    }
    const double a1 = raw[1], aT = raw[(size_t)T_diff];
    ns.a[0] = 1.0;
    ns.s[0] = 0.0;
    for (int64_t t = 1; t <= T_diff; ++t) {
        ns.a[(size_t)t] = a1 * (raw[(size_t)t] - aT) / (a1 - aT);
        ns.s[(size_t)t] = std::sqrt(1.0 - ns.a[(size_t)t] * ns.a[(size_t)t]);
    }
    return ns;
}

inline void write_schedule_csv(const std::string& path, const NoiseSchedule& ns) {
    FILE* f = std::fopen(path.c_str(), "w");
    check(f != nullptr, "schedule: cannot open " + path);
    std::fprintf(f, "t,a_t,s_t\n");
    for (int64_t t = 0; t <= ns.T; ++t)
        std::fprintf(f, "%lld,%.17g,%.17g\n", (long long)t, ns.a[(size_t)t], ns.s[(size_t)t]);
    std::fclose(f);
}

// cx*x + cy*y, the workhorse for z_t / v / recovery algebra.
template <class S>
inline TensorT<S> mix(const TensorT<S>& x, const TensorT<S>& y, double cx, double cy) {
    check(x.same_shape(y), "mix: shape mismatch");
    TensorT<S> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = (S)(cx * (double)x[i] + cy * (double)y[i]);
    return out;
}

template <class S>
inline TensorT<S> noisy_latent(const TensorT<S>& x0, const TensorT<S>& eps,
                               const NoiseSchedule& ns, int64_t t) {
    return mix(x0, eps, ns.a[(size_t)t], ns.s[(size_t)t]);
}

template <class S>
inline TensorT<S> v_target(const TensorT<S>& x0, const TensorT<S>& eps, const NoiseSchedule& ns,
                           int64_t t) {
    return mix(eps, x0, ns.a[(size_t)t], -ns.s[(size_t)t]);
}

template <class S>
inline TensorT<S> recover_x0(const TensorT<S>& z, const TensorT<S>& v, const NoiseSchedule& ns,
                             int64_t t) {
    return mix(z, v, ns.a[(size_t)t], -ns.s[(size_t)t]);
}

template <class S>
inline TensorT<S> recover_eps(const TensorT<S>& z, const TensorT<S>& v, const NoiseSchedule& ns,
                              int64_t t) {
    return mix(z, v, ns.s[(size_t)t], ns.a[(size_t)t]);
}

// ---------------------------------------------------------------------------
// Explicit uniform timestep sampling: [1,T] is split into n_ranks contiguous
// intervals whose sizes differ by at most one, and rank i draws uniformly
// from interval i.

struct StratumRange {
    int64_t lo, hi;  // inclusive
};

inline StratumRange stratum_range(int64_t T, int64_t n_ranks, int64_t rank) {
    check(n_ranks >= 1 && rank >= 0 && rank < n_ranks, "stratum: bad rank");
    return {1 + rank * T / n_ranks, (rank + 1) * T / n_ranks};
}

inline int64_t sample_timestep(int64_t T, int64_t n_ranks, int64_t rank, Rng& rng) {
    StratumRange r = stratum_range(T, n_ranks, rank);
    return rng.uniform_int(r.lo, r.hi);
}

// ---------------------------------------------------------------------------
// Monte-Carlo comparison of explicit uniform sampling against independent
// uniform draws. profile[t] is a synthetic per-timestep loss magnitude
// (index 0 unused). Each step averages one draw per rank; the report gives
// the variance of that per-step mean under both schemes plus a paired
// batch-means t statistic on (naive - explicit) per-batch variances.

struct VarianceReport {
    double explicit_var = 0.0;
    double naive_var = 0.0;
    double t_stat = 0.0;
    int64_t batches = 0;
    bool significant_99 = false;
};

// One-sided 99% critical value of Student t with 19 degrees of freedom,
// matching the fixed 20-batch split below.
inline constexpr double kT99Df19 = 2.539;

inline VarianceReport variance_experiment(const std::vector<double>& profile, int64_t T,
                                          int64_t n_ranks, int64_t steps, uint64_t seed) {
    check((int64_t)profile.size() >= T + 1, "variance_experiment: profile too short");
    check(steps >= 40, "variance_experiment: need at least 40 steps");
    std::vector<Rng> rng_e, rng_n;
    for (int64_t r = 0; r < n_ranks; ++r) {
        rng_e.emplace_back(Rng::hash_stream(seed, (uint64_t)r));
        rng_n.emplace_back(Rng::hash_stream(seed, 1000003ull + (uint64_t)r));
    }
    std::vector<double> mean_e((size_t)steps), mean_n((size_t)steps);
    for (int64_t j = 0; j < steps; ++j) {
        double se = 0, sn = 0;
        for (int64_t r = 0; r < n_ranks; ++r) {
            se += profile[(size_t)sample_timestep(T, n_ranks, r, rng_e[(size_t)r])];
            sn += profile[(size_t)rng_n[(size_t)r].uniform_int(1, T)];
        }
        mean_e[(size_t)j] = se / (double)n_ranks;
        mean_n[(size_t)j] = sn / (double)n_ranks;
    }

    auto sample_var = [](const double* x, int64_t n) {
        double mu = 0;
        for (int64_t i = 0; i < n; ++i) mu += x[i];
        mu /= (double)n;
        double v = 0;
        for (int64_t i = 0; i < n; ++i) v += (x[i] - mu) * (x[i] - mu);
        return v / (double)(n - 1);
    };

    VarianceReport rep;
    rep.explicit_var = sample_var(mean_e.data(), steps);
    rep.naive_var = sample_var(mean_n.data(), steps);

    const int64_t B = 20;
    rep.batches = B;
    const int64_t per = steps / B;
    std::vector<double> diff((size_t)B);
    for (int64_t b = 0; b < B; ++b)
        diff[(size_t)b] = sample_var(mean_n.data() + b * per, per) -
                          sample_var(mean_e.data() + b * per, per);
    double dmu = 0;
    for (double d : diff) dmu += d;
    dmu /= (double)B;
    double dvar = 0;
    for (double d : diff) dvar += (d - dmu) * (d - dmu);
    dvar /= (double)(B - 1);
    if (dvar < 1e-300) {
        rep.t_stat = 0.0;
        rep.significant_99 = false;
    } else {
        rep.t_stat = dmu / std::sqrt(dvar / (double)B);
        rep.significant_99 = rep.t_stat > kT99Df19;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// DDIM. The grid is a uniform stride of `steps` timesteps from T down to 1;
// each visit estimates (x0, eps) from v-hat and re-noises to the next grid
// point, and the final visit returns the clean estimate.

inline std::vector<int64_t> ddim_grid(int64_t T, int64_t steps) {
    check(steps >= 1, "ddim: steps must be >= 1");
    check(steps <= T, "ddim: steps exceeds schedule length");
    std::vector<int64_t> ts((size_t)steps);
    if (steps == 1) {
        ts[0] = T;
        return ts;
    }
    for (int64_t k = 0; k < steps; ++k)
        ts[(size_t)k] = (int64_t)std::llround((double)T -
                                              (double)k * (double)(T - 1) / (double)(steps - 1));
    for (size_t k = 1; k < ts.size(); ++k)
        check(ts[k] < ts[k - 1] && ts[k] >= 1, "ddim: grid not strictly decreasing");
    return ts;
}

template <class S, class ModelFn>
TensorT<S> ddim_sample(const NoiseSchedule& ns, ModelFn&& vhat, TensorT<S> z, int64_t steps) {
    const std::vector<int64_t> ts = ddim_grid(ns.T, steps);
    TensorT<S> x0;
    for (size_t k = 0; k < ts.size(); ++k) {
        const int64_t t = ts[k];
        TensorT<S> v = vhat(z, t);
        x0 = recover_x0(z, v, ns, t);
        if (k + 1 < ts.size()) {
            TensorT<S> eps = recover_eps(z, v, ns, t);
            z = mix(x0, eps, ns.a[(size_t)ts[k + 1]], ns.s[(size_t)ts[k + 1]]);
        }
    }
    return x0;
}

// ---------------------------------------------------------------------------
// Image-to-video conditioning: the encoded first frame sits at latent frame
// 0 with zeros after it; training corrupts it with noise from a mid-range
// timestep band so the model cannot rely on a clean condition.

inline Tensor make_i2v_condition(const Tensor& mean_frame0, int64_t T_lat) {
    check(mean_frame0.rank() == 4 && mean_frame0.shape[0] == 1,
          "i2v: condition source must be a single latent frame (1,H,W,C)");
    Tensor cond({T_lat, mean_frame0.shape[1], mean_frame0.shape[2], mean_frame0.shape[3]});
    for (int64_t i = 0; i < mean_frame0.numel(); ++i) cond[i] = mean_frame0[i];
    return cond;
}

inline Tensor corrupt_i2v_condition(const Tensor& cond, const NoiseSchedule& ns, Rng& rng,
                                    int64_t* tau_out = nullptr) {
    const int64_t lo = (int64_t)(0.3 * (double)ns.T);
    const int64_t hi = (int64_t)(0.7 * (double)ns.T);
    const int64_t tau = rng.uniform_int(lo, hi);
    if (tau_out) *tau_out = tau;
    Tensor eps = randn<float>(rng, cond.shape);
    return mix(cond, eps, ns.a[(size_t)tau], ns.s[(size_t)tau]);
}

}  // namespace dv

#endif
