// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace clora {

/// Independent child seed for a named stream, so every consumer of
/// randomness in a run hangs off one 64-bit root seed (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  std::uint64_t z = root + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::uint64_t stream) {
  return std::mt19937_64(derive_seed(root, stream));
}

// Stream identifiers.
enum Stream : std::uint64_t {
  kStreamBackbone = 1,
  kStreamAdapters = 2,
  kStreamHead = 3,
  kStreamTask = 4,
  kStreamShuffle = 5,
  kStreamProbe = 6,
};

}  // namespace clora
