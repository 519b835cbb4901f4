#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace mmp {

/// Counter-based random stream (Philox4x32-10).
///
/// The 64-bit seed is the Philox key; the stream id occupies the upper half of
/// the 128-bit counter, so streams never overlap and stream b can be created
/// directly without advancing any other stream. Satisfies
/// UniformRandomBitGenerator, so it plugs into <random> distributions.
class RngStream {
public:
    using result_type = std::uint64_t;

    RngStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          stream_(stream_id) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    [[nodiscard]] std::uint64_t seed() const noexcept {
        return static_cast<std::uint64_t>(key_[0]) | (static_cast<std::uint64_t>(key_[1]) << 32);
    }
    [[nodiscard]] std::uint64_t stream_id() const noexcept { return stream_; }

    result_type operator()() noexcept {
        if (lane_ == 2) {
            refill();
        }
        const auto lo = static_cast<std::uint64_t>(block_[2 * lane_]);
        const auto hi = static_cast<std::uint64_t>(block_[2 * lane_ + 1]);
        ++lane_;
        return lo | (hi << 32);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1]; safe for log().
    double uniform_open_low() noexcept { return 1.0 - uniform(); }

    /// Uniform index in [0, n) from a single uniform variate.
    std::size_t index(std::size_t n) noexcept { return scale_index(uniform(), n); }

    double normal() { return std_normal_(*this); }

    double exponential() { return -std::log(uniform_open_low()); }

    /// Maps u in [0,1) to [0, n); clamps the u*n == n rounding edge.
    static std::size_t scale_index(double u, std::size_t n) noexcept {
        auto k = static_cast<std::size_t>(u * static_cast<double>(n));
        return k < n ? k : n - 1;
    }

    /// Raw Philox4x32-10 block function, exposed for known-answer tests.
    static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) noexcept {
        constexpr std::uint32_t m0 = 0xD2511F53u;
        constexpr std::uint32_t m1 = 0xCD9E8D57u;
        constexpr std::uint32_t w0 = 0x9E3779B9u;
        constexpr std::uint32_t w1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += w0;
                key[1] += w1;
            }
            const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const auto lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const auto lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        }
        return ctr;
    }

private:
    void refill() noexcept {
        block_ = philox({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                         static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                        key_);
        ++counter_;
        lane_ = 0;
    }

    std::array<std::uint32_t, 2> key_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> block_{};
    int lane_ = 2;
    std::normal_distribution<double> std_normal_{0.0, 1.0};
};

} // namespace mmp
