#pragma once

#include <cmath>
#include <cstdint>

namespace vp {

// splitmix64 step; the whole project derives randomness from this.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return mix64(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2) + b));
}

// Counter-based generator. split() derives an independent stream, so
// per-sample / per-step streams can be drawn without shared mutable state;
// that is what makes training resumable and batch order reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix64(seed ^ 0x853c49e6748fea9bull)), counter_(0) {}

    uint64_t next_u64() {
        ++counter_;
        state_ = mix64(state_);
        return state_;
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    float uniformf() { return float(uniform()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return n <= 1 ? 0 : int(next_u64() % uint64_t(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one value per call, always consumes two uniforms.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }
    float normalf() { return float(normal()); }

    // Truncated at 2 std, resampled.
    float trunc_normalf(float std_dev) {
        for (int i = 0; i < 64; ++i) {
            float z = normalf();
            if (std::fabs(z) <= 2.0f) return z * std_dev;
        }
        return 0.0f;
    }

    Rng split(uint64_t stream) const { return Rng(hash_combine(state_, stream)); }

    uint64_t state() const { return state_; }
    uint64_t counter() const { return counter_; }

private:
    uint64_t state_;
    uint64_t counter_;
};

// Stream for (seed, step): training loops draw all per-step randomness from
// this, so resuming at step k reproduces the uninterrupted run exactly.
inline Rng step_rng(uint64_t seed, uint64_t step) { return Rng(hash_combine(mix64(seed), step)); }

} // namespace vp
