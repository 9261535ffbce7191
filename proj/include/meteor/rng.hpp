#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace meteor {

/// Seeded generator used everywhere randomness is needed. Fixed engine so
/// results are reproducible for a given seed on a given standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    std::uint64_t below(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }
    template <typename T>
    void fill_normal(std::span<T> out, double stddev) {
        for (T& v : out) v = static_cast<T>(normal(0.0, stddev));
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer, for deriving independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace meteor
