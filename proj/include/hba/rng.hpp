#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace hba {

// Deterministic PRNG (xoshiro256**, splitmix64 seeding). Distributions are
// hand-rolled so streams are bit-identical across platforms and standard
// libraries; std::uniform_real_distribution makes no such guarantee.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    // Independent stream addressed by (seed, tags...). Used for per-sample
    // augmentation streams so results do not depend on iteration order.
    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::uint64_t x = seed;
        for (std::uint64_t t : tags) {
            x ^= t + 0x9e3779b97f4a7c15ULL;
            x = splitmix64(x);
        }
        return Rng(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // standard normal, Box-Muller (two draws per call, no caching so the
    // stream position is a pure function of the call count)
    double normal() {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [0, n)
    std::uint64_t bounded(std::uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t s_[4];
};

} // namespace hba
