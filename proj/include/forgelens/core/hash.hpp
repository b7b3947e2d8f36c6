#pragma once

#include <cstdint>
#include <string_view>

namespace forgelens {

constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for a named consumer of randomness: splitmix64(seed ^ fnv1a64(name)).
/// Every module draws from its own derived seed so adding a consumer never
/// perturbs the streams of the others.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
    return splitmix64(seed ^ fnv1a64(name));
}

} // namespace forgelens
