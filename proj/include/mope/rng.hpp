#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mope {

using Rng = std::mt19937_64;

// Every random decision derives from one user seed through named
// sub-streams: sub_seed(seed, "pretrain"), sub_seed(seed, "expert/3"), ...
// The name is hashed with FNV-1a, mixed with the seed and finalized with
// splitmix64, so streams are independent of the order they are requested in.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view stream) {
  return splitmix64(splitmix64(seed) ^ fnv1a(stream));
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream) { return Rng(sub_seed(seed, stream)); }

}  // namespace mope
