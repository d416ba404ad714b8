#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fable {

// Deterministic RNG. mt19937_64 has standardized output, and all
// distributions below are implemented by hand so that a seed produces the
// same stream on every platform (std::normal_distribution is
// implementation-defined and would break byte-identical replays).
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive, by rejection.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return lo + static_cast<int64_t>(x % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    void fill_normal(std::vector<double>& out, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : out) v = normal(mean, stddev);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a over a label, mixed with the root seed. Every stage of a run pulls
// its own stream from the single root seed through this, so stages can be
// replayed independently.
inline uint64_t derive_seed(uint64_t root, std::string_view label) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    h ^= root + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    // SplitMix64 finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

}  // namespace fable
