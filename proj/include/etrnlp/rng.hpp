#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace etrnlp {

// splitmix64; used to derive independent seed streams from one experiment seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic sub-seed for a named stream, e.g. mix_seed(seed, "stage1.conv1.w").
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream) {
    std::uint64_t s = seed ^ fnv1a64(stream);
    return splitmix64(s);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    return splitmix64(s);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace etrnlp
