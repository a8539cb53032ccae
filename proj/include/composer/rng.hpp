#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace composer {

// Deterministic stream generator built on SplitMix64. The state advances by
// the golden-ratio increment and each output is the standard murmur-style
// finalizer of the new state, so identical seeds give identical streams on
// every platform. Purpose-specific substreams are derived by key-splitting:
// child_seed = finalize(root_seed ^ fnv1a64(purpose)).
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : root_(seed), state_(seed) {}

    std::uint64_t root_seed() const { return root_; }

    // Derived stream for a named purpose ("data", "init", "noise", "sampler", ...).
    SeededRng split(std::string_view purpose) const {
        return SeededRng(finalize_mix(root_ ^ fnv1a64(purpose)));
    }

    // Numeric key variant, used when substreams are indexed (per-seed jobs etc.).
    SeededRng split(std::uint64_t key) const {
        return SeededRng(finalize_mix(root_ ^ (0x9E3779B97F4A7C15ULL * (key + 1))));
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform();  // (0, 1], keeps log finite
        const double radius = std::sqrt(-2.0 * std::log(u));
        const double angle = 2.0 * std::numbers::pi * uniform();
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    std::int64_t range(std::int64_t n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return static_cast<std::int64_t>(x % un);
    }

    static std::uint64_t fnv1a64(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const char c : s) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

private:
    static std::uint64_t finalize_mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t root_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace composer
