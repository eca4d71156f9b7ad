#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace splitmeanflow {

using Rng = std::mt19937_64;

// Independent named stream derived from a master seed (data, times,
// cfg-dropout, init, ...). Same (seed, name) always yields the same stream.
inline Rng substream(std::uint64_t master_seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer
  std::uint64_t z = master_seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return Rng(z);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace splitmeanflow
