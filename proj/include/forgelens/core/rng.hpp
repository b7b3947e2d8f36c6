#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace forgelens {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
///
/// State is (key, counter); there is no hidden global. A stream is fully
/// addressed by its key and starting counter, so a consumer can resume at any
/// position by reconstructing the generator instead of replaying draws.
class Philox {
public:
    explicit Philox(std::uint64_t key, std::uint64_t stream = 0) noexcept
        : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)},
          counter_{0, 0, static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)} {}

    std::uint32_t next_u32() noexcept {
        if (pos_ == 4) {
            block_ = round10(counter_, key_);
            bump();
            pos_ = 0;
        }
        return block_[pos_++];
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n) without modulo bias.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller; the second variate is discarded so
    /// every draw consumes a fixed number of counter words.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, sigma) resampled until inside [-2 sigma, 2 sigma].
    double truncated_normal(double sigma) noexcept {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * sigma;
        }
    }

private:
    using Block = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Block round10(Block c, Key k) noexcept {
        constexpr std::uint32_t m0 = 0xD2511F53, m1 = 0xCD9E8D57;
        constexpr std::uint32_t w0 = 0x9E3779B9, w1 = 0xBB67AE85;
        for (int r = 0; r < 10; ++r) {
            const std::uint64_t p0 = std::uint64_t{m0} * c[0];
            const std::uint64_t p1 = std::uint64_t{m1} * c[2];
            c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0], static_cast<std::uint32_t>(p1),
                 static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1], static_cast<std::uint32_t>(p0)};
            k[0] += w0;
            k[1] += w1;
        }
        return c;
    }

    void bump() noexcept {
        for (auto& w : counter_) {
            if (++w != 0) break;
        }
    }

    Key key_;
    Block counter_;
    Block block_{};
    int pos_ = 4;
};

} // namespace forgelens
