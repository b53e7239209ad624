// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace roimatch {

// Deterministic xoshiro256** generator. Self-contained so that streams are
// reproducible across platforms and standard library versions; seeded streams
// can be forked for independent sub-generators (data vs. weights vs. batches).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed + 0x9e3779b97f4a7c15ULL;
        for (auto& word : s_) {
            x = splitmix(x);
            word = x;
        }
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [lo, hi] inclusive.
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next() % static_cast<uint64_t>(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; avoids std::normal_distribution (implementation-defined).
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // Independent child stream; distinct tags give distinct streams.
    Rng fork(uint64_t tag) {
        uint64_t mix = splitmix(s_[0] ^ rotl(tag + 0x632be59bd9b4e019ULL, 23));
        return Rng(mix ^ next());
    }

private:
    static uint64_t splitmix(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t splitmix(uint64_t&& x) {
        uint64_t v = x;
        return splitmix(v);
    }
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4];
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace roimatch
