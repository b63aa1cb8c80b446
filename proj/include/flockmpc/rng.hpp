// SPDX-License-Identifier: MIT
#pragma once

#include <cstdint>
#include <random>

namespace flockmpc {

/// SplitMix64 mixing step; used to derive statistically independent child
/// seeds from one master seed without correlated low bits.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for a named stream (e.g. one per sample, per agent, per seed
/// index). Fixed arithmetic chain keeps every run bitwise reproducible.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ (0x51ed2701a2b9e4d5ULL * (stream + 1))) +
                    index);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64{seed};
}

}  // namespace flockmpc
