#pragma once

#include <cstdint>
#include <initializer_list>

namespace qdetect {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a coordinate path
// (stream tag, layer, index, ...). Stable across platforms and runs.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(base);
    for (auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
    return s;
}

// Stream tags so that different consumers of one seed never share a stream.
namespace stream {
inline constexpr std::uint64_t kLabels = 1;
inline constexpr std::uint64_t kImages = 2;
inline constexpr std::uint64_t kConnectivity = 3;
inline constexpr std::uint64_t kMlpInit = 4;
inline constexpr std::uint64_t kMlpShuffle = 5;
inline constexpr std::uint64_t kVitInit = 6;
inline constexpr std::uint64_t kVitShuffle = 7;
} // namespace stream

} // namespace qdetect
