#pragma once

#include <cstdint>
#include <random>

#include "vfp/types.hpp"

namespace vfp {

// splitmix64 finalizer; used to derive independent stream seeds from a
// base seed and a set of integer keys.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t seed_key(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc908ULL);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

// Counter-based stream: a freshly seeded engine per (key) tuple, so draws
// are independent of evaluation order across particles/steps.
inline std::mt19937_64 engine_for(std::uint64_t seed, std::uint64_t a,
                                  std::uint64_t b = 0, std::uint64_t c = 0) {
  return std::mt19937_64(seed_key(seed, a, b, c));
}

inline StateVector standard_normal(int n, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, 1.0);
  StateVector v(n);
  for (int i = 0; i < n; ++i) v[i] = dist(gen);
  return v;
}

}  // namespace vfp
