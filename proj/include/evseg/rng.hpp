#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace evseg {

// Deterministic pseudo-random generator (splitmix64). The whole pipeline
// must be bit-reproducible across platforms and standard library versions,
// so nothing here may depend on std::mt19937 or the unspecified
// std::uniform_*_distribution algorithms.
//
// Two usage patterns:
//   * sequential stream:  Rng r(seed); r.uniform(); ...
//   * counter-based:      Rng::at(seed, counter) derives an independent
//     stream for e.g. one voxel of one DWI measurement, so noise does not
//     depend on evaluation order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Stream seeded by a (seed, counter) pair. mix() separates the inputs
    // so that nearby counters give unrelated streams.
    static Rng at(std::uint64_t seed, std::uint64_t counter) {
        return Rng(mix(seed, counter));
    }

    // Collapses two 64-bit values into one well-scrambled seed.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        return scramble(scramble(a + 0x9e3779b97f4a7c15ull) ^ (b + 0xbf58476d1ce4e5b9ull));
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return scramble(state_);
    }

    // Uniform in [0, 1). 53 mantissa bits, so every value is exact.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny compared to 2^64, the bias is far below anything
    // observable, and the result stays platform-independent.
    std::uint64_t uniform_index(std::uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller. Consumes two uniforms per pair and
    // caches the second value.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // u1 == 0 would ask for log(0); nudge onto (0, 1).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    // Fisher-Yates shuffle with this generator (std::shuffle's sequence of
    // calls is implementation-defined, so it cannot be used).
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    // splitmix64 finalizer.
    static std::uint64_t scramble(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace evseg
