#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "matchs/tensor.hpp"

namespace matchs {

// Counter-based generator: the n-th output is a bijective mix of
// (key, n), so a stream is fully described by its key and position.
// Consumers derive independent keys from (seed, stream name) and never
// perturb each other.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

    static Rng stream(std::uint64_t seed, std::string_view name) {
        Rng r(seed);
        r.key_ = mix(r.key_ ^ hash(name));
        return r;
    }

    // Independent child stream, e.g. one per sampling chain.
    Rng fork(std::uint64_t index) const {
        Rng r(*this);
        r.key_ = mix(key_ + 0x9e3779b97f4a7c15ULL * (index + 1) + 0x632be59bd9b4e019ULL);
        r.counter_ = 0;
        r.spare_valid_ = false;
        return r;
    }

    std::uint64_t next_u64() {
        ++counter_;
        return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via the Box-Muller transform; the second variate is cached.
    double gaussian() {
        if (spare_valid_) {
            spare_valid_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        spare_valid_ = true;
        return radius * std::cos(angle);
    }

    std::uint64_t position() const { return counter_; }

   private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t hash(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool spare_valid_ = false;
};

inline Tensor gaussian(Shape shape, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.gaussian();
    return Tensor(std::move(shape), std::move(v));
}

}  // namespace matchs
