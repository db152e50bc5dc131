/*
 * Copyright 2026 The posbias Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace posbias {

// Deterministic randomness for the whole toolkit. Every stream is a
// splitmix64 sequence whose seed is derived from the master seed plus a
// textual tag and up to two indices, so results are reproducible bit-for-bit
// and independent of execution order or worker count.

namespace rng_detail {

inline std::uint64_t finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h = h * 1099511628211ull;
  }
  return h;
}

}  // namespace rng_detail

/// Derives an independent stream seed from (seed, tag, indices).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  using rng_detail::finalize;
  std::uint64_t h = finalize(seed ^ rng_detail::fnv1a(tag));
  h = finalize(h + 0x9E3779B97F4A7C15ull * (a + 1));
  h = finalize(h + 0xC2B2AE3D27D4EB4Full * (b + 1));
  return h;
}

/// splitmix64 generator. Small state, cheap construction, streams derived via
/// derive_seed are statistically independent for simulation purposes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    return rng_detail::finalize(z);
  }

  /// Uniform double in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1].
  double uniform_pos() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

  bool chance(double p) { return uniform() < p; }

  /// Unbiased uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
    std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t t = (0 - n) % n;
      while (lo < t) {
        x = next();
        m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller (uncached, two uniforms per draw).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace posbias
