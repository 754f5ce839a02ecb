#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace unlearnkit {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for a sub-stream identified by (base, parts...). Order of parts matters.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) noexcept {
    std::uint64_t h = mix64(base);
    for (auto p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

// Stream tags so that derived seeds for different purposes never collide.
namespace stream {
inline constexpr std::uint64_t selection = 1;
inline constexpr std::uint64_t relabel = 2;
inline constexpr std::uint64_t attack_target = 3;
inline constexpr std::uint64_t attack_start = 4;
inline constexpr std::uint64_t shuffle = 5;
inline constexpr std::uint64_t init = 6;
inline constexpr std::uint64_t synth = 7;
inline constexpr std::uint64_t template_field = 8;
inline constexpr std::uint64_t adversarial_order = 9;
inline constexpr std::uint64_t remain_order = 10;
}  // namespace stream

}  // namespace unlearnkit
