#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace twinforge {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Seed of the substream a given name forks off a root seed.
inline uint64_t fork_seed(uint64_t seed, std::string_view name) {
    return seed ^ (fnv1a64(name) * 0x9e3779b97f4a7c15ull);
}

// Seeded random stream. mt19937_64 output is fully specified by the
// standard, and every derived draw below is built from raw 64-bit words,
// so sequences are identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed), seed_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform double in [0, 1), 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; pairs cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, bound) by rejection; unbiased.
    uint64_t below(uint64_t bound) {
        if (bound <= 1) return 0;
        uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % bound;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream derived from a name; used so per-tensor and
    // per-epoch streams stay reproducible regardless of evaluation order.
    Rng fork(std::string_view name) const { return Rng(fork_seed(seed_, name)); }

    uint64_t seed() const { return seed_; }

private:
    std::mt19937_64 gen_;
    uint64_t seed_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace twinforge
