#pragma once

#include <cmath>
#include <cstdint>

namespace sokd {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Mixes two seeds into one stream id, used to derive independent
// deterministic streams (e.g. per-epoch shuffles) from a base seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s = h ^ (b + 0x9E3779B97F4A7C15ull);
    return splitmix64(s);
}

// Self-contained PRNG so that data generation and parameter init are
// bit-reproducible regardless of the standard library's distribution
// implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // warm-up so that small seeds diverge immediately
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0,1) with 24 bits of mantissa
    float uniform() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

    // standard normal via Box-Muller, one spare cached
    float gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.28318530717958647692f * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

  private:
    std::uint64_t state_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace sokd
