// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace metis {

// Stateless 64-bit finalizer (splitmix64 output stage). Used to spread
// structured ids (step, layer, role, block) into independent stream seeds.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed) { return seed; }

// Chain-mix an arbitrary list of ids into a base seed. Order sensitive:
// derive_seed(s, a, b) != derive_seed(s, b, a) in general.
template <typename... Rest>
inline uint64_t derive_seed(uint64_t seed, uint64_t id, Rest... rest) {
    return derive_seed(mix64(seed + 0x9e3779b97f4a7c15ull * (id + 1)), rest...);
}

// xoshiro256++ with splitmix64 state expansion. Deterministic across
// platforms; every consumer gets its own stream keyed by logical ids so
// serial and batched execution orders produce identical draws.
class RngStream {
  public:
    explicit RngStream(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : state_) {
            sm += 0x9e3779b97f4a7c15ull;
            w = mix64(sm);
        }
        // All-zero state is invalid for xoshiro; the mixed expansion of any
        // seed avoids it except by astronomical accident.
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection keeps it unbiased.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("next_below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal via the polar method. No libm trig, so draws are
    // bit-identical across platforms with the same uniform stream.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double r = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * r;
        has_spare_ = true;
        return u * r;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace metis
