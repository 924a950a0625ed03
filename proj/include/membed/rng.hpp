#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace membed {

// Deterministic 64-bit generator (xoshiro256++) seeded through splitmix64
// so that (seed, stream) pairs give decorrelated sequences. Every consumer
// of randomness in the library takes an Rng by reference; nothing reads
// global state, so runs are reproducible from the seeds alone.
class Rng {
public:
    // Fixed stream ids. Data order, parameter init, and dropout draw from
    // separate streams so changing one consumer does not shift the others.
    static constexpr std::uint64_t kStreamData = 1;
    static constexpr std::uint64_t kStreamInit = 2;
    static constexpr std::uint64_t kStreamDropout = 3;

    Rng() : Rng(0, 0) {}

    Rng(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
        for (auto& word : state_) word = splitmix64(x);
        // All-zero state is the one invalid xoshiro state.
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Child generator for an independent substream (e.g. one per dropout
    // branch). Consumes one draw from this generator.
    Rng split(std::uint64_t substream) { return Rng(next_u64(), substream); }

    // Full state as 6 words: 4 xoshiro words, the spare-cached flag, and
    // the spare value bit-cast to u64. Round-trips exactly.
    std::array<std::uint64_t, 6> save_state() const {
        return {state_[0], state_[1], state_[2], state_[3],
                has_spare_ ? std::uint64_t{1} : std::uint64_t{0},
                std::bit_cast<std::uint64_t>(spare_)};
    }

    void load_state(const std::array<std::uint64_t, 6>& words) {
        state_ = {words[0], words[1], words[2], words[3]};
        has_spare_ = words[4] != 0;
        spare_ = std::bit_cast<double>(words[5]);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::array<std::uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace membed
