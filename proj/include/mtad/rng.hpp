#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mtad {

// Seeded generator used everywhere randomness is needed. All draws are
// hand-rolled on top of mt19937_64 (whose output sequence is pinned by the
// standard) instead of std::*_distribution, so streams are reproducible
// across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : gen_(seed ? seed : 0x9e3779b97f4a7c15ULL), seed_hash_(mix(seed)) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) {
    std::size_t i = static_cast<std::size_t>(u01() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = u01();
    while (u1 <= 0.0) u1 = u01();
    const double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Derives an independent child stream from this stream's seed lineage and
  // a tag. Forking does not advance the parent.
  Rng fork(std::string_view tag, std::uint64_t salt = 0) const {
    std::uint64_t h = seed_hash_;
    for (char c : tag) h = mix(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    h = mix(h ^ salt);
    Rng child(h);
    child.seed_hash_ = h;
    return child;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 gen_;
  std::uint64_t seed_hash_;
};

}  // namespace mtad
