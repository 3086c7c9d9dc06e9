#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "continual/common.hpp"

namespace continual {

// All randomness in the library flows through this wrapper. std::mt19937_64 has a
// standardized output sequence, but the std distributions do not, so the transforms
// below are written out by hand to keep runs reproducible across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Uniform integer in [0, n), rejection-sampled so every value is equally likely.
    std::uint64_t uniform_int(std::uint64_t n) {
        require(n > 0, "uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();  // log(0) guard, astronomically rare
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Fisher-Yates shuffle using uniform_int, so the permutation is reproducible.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

/// Mixes a master seed with a purpose tag and indices into an independent stream seed.
/// Keeps RNG consumption in one phase (init, shuffling, sampling, ...) from shifting
/// the streams used by another, which is what makes method A vs method B comparisons
/// bitwise-fair on shared phases.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    // FNV-1a over the tag, then splitmix64 finalizers to spread the bits.
    std::uint64_t h = 14695981039346656037ull;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    auto mix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    };
    std::uint64_t s = mix(master ^ h);
    s = mix(s ^ mix(a + 0x517cc1b727220a95ull));
    s = mix(s ^ mix(b + 0x2545f4914f6cdd1dull));
    return s;
}

}  // namespace continual
