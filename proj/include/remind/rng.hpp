#pragma once

#include <cstdint>
#include <random>

namespace remind {

// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) { return Rng(mix_seed(seed, stream)); }

// Named streams so each consumer of a seed draws independent numbers.
namespace stream {
inline constexpr std::uint64_t kLabelRule = 1;
inline constexpr std::uint64_t kSamples = 2;
inline constexpr std::uint64_t kSplit = 3;
inline constexpr std::uint64_t kModelInit = 4;
inline constexpr std::uint64_t kBatches = 5;
inline constexpr std::uint64_t kAnalysis = 6;
inline constexpr std::uint64_t kProtocol = 7;
inline constexpr std::uint64_t kPowerIteration = 8;
}  // namespace stream

}  // namespace remind
