#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "attn/common.hpp"

namespace attn {

// Deterministic random source. Self-contained xoshiro256++ seeded through
// splitmix64 so that streams are identical across standard libraries and
// platforms; every consumer takes an explicit Rng, there is no ambient
// randomness anywhere in the library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
    cached_normal_valid_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Marsaglia polar method; caches the spare deviate.
  double normal() {
    if (cached_normal_valid_) {
      cached_normal_valid_ = false;
      return cached_normal_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double k = std::sqrt(-2.0 * std::log(s) / s);
    cached_normal_ = v * k;
    cached_normal_valid_ = true;
    return u * k;
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  std::size_t uniform_index(std::size_t n) {
    check(n > 0, "uniform_index: empty range");
    return static_cast<std::size_t>(next_u64() % n);
  }

  // Multinoulli draw over `probs` (assumed nonnegative, summing to ~1).
  // Any residual mass from rounding goes to the last index.
  std::size_t categorical(std::span<const double> probs) {
    check(!probs.empty(), "categorical: empty distribution");
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return probs.size() - 1;
  }

  // Child stream derived from the construction seed only, so the set of
  // streams a run uses is independent of how much any of them consumed.
  Rng split(std::uint64_t stream) const {
    std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    x = splitmix64(x);
    return Rng(x);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t state_[4];
  double cached_normal_ = 0.0;
  bool cached_normal_valid_ = false;
};

}  // namespace attn
