// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Seed splitting. A run has one root seed; every consumer derives its own
// stream as derive_seed(root, stream, counter) so that adding a consumer never
// shifts the random numbers seen by another.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ratdd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used to turn stream names into ids.
constexpr std::uint64_t stream_id(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream,
                                 std::uint64_t counter = 0) {
  return splitmix64(splitmix64(splitmix64(root) ^ stream) ^ counter);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                 std::uint64_t counter = 0) {
  return derive_seed(root, stream_id(stream), counter);
}

inline Rng make_rng(std::uint64_t root, std::string_view stream,
                    std::uint64_t counter = 0) {
  return Rng(derive_seed(root, stream, counter));
}

}  // namespace ratdd
