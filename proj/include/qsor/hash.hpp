// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace qsor {

/// Fixed 64-bit mixer (splitmix64 finalizer). Stable across runs and platforms.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t kHashSeed = 0x5153'4f52'2d66'7031ULL;

constexpr std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) noexcept {
  return mix64(seed ^ mix64(value + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t hash_values(std::initializer_list<std::uint64_t> values,
                                    std::uint64_t seed = kHashSeed) noexcept {
  std::uint64_t h = seed;
  for (auto v : values) h = hash_combine(h, v);
  return h;
}

inline std::uint64_t hash_span(std::span<const std::uint64_t> values,
                               std::uint64_t seed = kHashSeed) noexcept {
  std::uint64_t h = seed;
  for (auto v : values) h = hash_combine(h, v);
  return h;
}

/// Counter-based uniform draw in [0, 1). Same key always yields the same value.
constexpr double counter_uniform(std::initializer_list<std::uint64_t> key) noexcept {
  return static_cast<double>(hash_values(key) >> 11) * 0x1.0p-53;
}

/// Derives an independent seed for a sub-task (label, tree, resample, ...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
  return hash_values({seed, a, b}, 0x6a09e667f3bcc909ULL);
}

/// Fisher-Yates shuffle driven by counter_uniform({seed, i}).
template <class T>
void counter_shuffle(std::vector<T>& v, std::uint64_t seed) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(counter_uniform({seed, i}) * static_cast<double>(i));
    if (j >= i) j = i - 1;
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace qsor
