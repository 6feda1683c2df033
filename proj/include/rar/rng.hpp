// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "rar/common.hpp"

namespace rar {

// Deterministic random source. All draws go through the custom methods below
// rather than std distributions, whose outputs vary across standard library
// implementations; mt19937_64 itself is pinned by the standard.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller. The second value is discarded so the
  // draw count per call is fixed, which keeps stream replay exact.
  double next_gauss() {
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Normal(0, stddev) resampled until within two standard deviations.
  double next_trunc_normal(double stddev) {
    double g;
    do {
      g = next_gauss();
    } while (g < -2.0 || g > 2.0);
    return g * stddev;
  }

  // mt19937_64 state round-trips through text exactly.
  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("Rng::restore: malformed state");
  }

 private:
  std::mt19937_64 eng_;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed, a stream name, and
// an optional index. Distinct names or indices give unrelated streams.
inline uint64_t derive_seed(uint64_t master, std::string_view stream, uint64_t index = 0) {
  uint64_t h = fnv1a64(stream);
  return splitmix64(splitmix64(master ^ h) ^ (index * 0x9e3779b97f4a7c15ull + 1));
}

inline Rng derive_rng(uint64_t master, std::string_view stream, uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

}  // namespace rar
