#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace meddiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t key) {
    return splitmix64(base ^ splitmix64(key + 0x9e3779b97f4a7c15ULL));
}

// Deterministic random stream with cheap keyed substreams. All draws are
// defined on top of mt19937_64 only, so sequences are identical across
// platforms and standard library implementations.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    // Independent child stream; derivation depends only on (seed, key),
    // not on how much this stream has been consumed.
    RngStream child(std::uint64_t key) const { return RngStream(mix_seed(seed_, key)); }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
        std::uint64_t draw;
        do {
            draw = engine_();
        } while (draw >= limit);
        return lo + static_cast<std::int64_t>(draw % span);
    }

    // Standard normal via Box-Muller; two uniforms per draw, no cached spare.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Knuth's product method; fine for the small means used here.
    int poisson(double lambda) {
        const double threshold = std::exp(-lambda);
        int count = 0;
        double product = uniform();
        while (product > threshold) {
            ++count;
            product *= uniform();
        }
        return count;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace meddiff
