// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace devcloud {

// splitmix64 finalizer; used to derive independent stream seeds and to hash
// token prefixes into deterministic per-context randomness.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
std::uint64_t hash_sequence(std::span<const T> values, std::uint64_t seed) noexcept {
  std::uint64_t h = mix64(seed ^ 0x5bd1e995ULL);
  for (const T& v : values) {
    h = mix64(h ^ static_cast<std::uint64_t>(v));
  }
  return mix64(h ^ values.size());
}

// Converts the top 53 bits of a 64-bit word into a double in [0, 1).
constexpr double unit_interval(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Seeded pseudo-random source. Wraps std::mt19937_64 (whose output sequence
/// is fixed by the standard) and derives doubles by bit manipulation instead
/// of std::uniform_real_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return unit_interval(engine_()); }

  // Integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  // Independent child stream; the same (seed, stream) always yields the same child.
  Rng fork(std::uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + 0x632be59bd9b4e019ULL))); }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace devcloud
