#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace riemannformer {

/// Splittable counter-based generator. Every stream is a (key, counter)
/// pair; outputs come from a SplitMix64-style finalizer of key + counter,
/// so replaying a stream is position-independent and split() derives
/// statistically independent child streams from a tag. All randomness in
/// the project flows from one root seed through this type.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(finalize(seed ^ kSalt)) {}

    /// Derive an independent child stream. Tags are stable identifiers
    /// (epoch number, parameter index, property id, ...).
    Rng split(std::uint64_t tag) const {
        return Rng(rekey(key_, tag));
    }

    std::uint64_t next_u64() {
        counter_ += kGamma;
        return finalize(key_ ^ counter_);
    }

    /// Uniform in [0, 1), 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Uniform integer in [0, n), n >= 1.
    std::uint64_t uniform_int(std::uint64_t n) {
        // 64-bit multiply-shift; bias is negligible for the n used here.
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    long range(long lo, long hi_inclusive) {
        return lo + static_cast<long>(
                        uniform_int(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    /// Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal truncated to [-2, 2] standard deviations before scaling.
    double truncated_normal(double stddev) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return z * stddev;
    }

    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            const auto j = static_cast<decltype(i)>(uniform_int(static_cast<std::uint64_t>(i + 1)));
            std::swap(first[i], first[j]);
        }
    }

private:
    explicit Rng(std::uint64_t key, int) : key_(key) {}

    static constexpr std::uint64_t kSalt = 0x8e51'2df1'77a6'1b4bULL;
    static constexpr std::uint64_t kGamma = 0x9e37'79b9'7f4a'7c15ULL;

    static std::uint64_t finalize(std::uint64_t z) {
        z += kGamma;
        z = (z ^ (z >> 30)) * 0xbf58'476d'1ce4'e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d0'49bb'1331'11ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rekey(std::uint64_t key, std::uint64_t tag) {
        return finalize(key ^ finalize(tag + kSalt));
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace riemannformer
