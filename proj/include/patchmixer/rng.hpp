#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace pm {

// Seeded random source with portable output mapping. std::mt19937_64 is
// bit-exact across platforms, but the standard <random> distributions are
// not, so the mappings below are done by hand. Every random decision in the
// project (init, dropout, shuffling, synthetic data) flows through one of
// these instances; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates; deterministic for a given seed, unlike std::shuffle.
  template <typename V>
  void shuffle(V& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Derive an independent stream from the construction seed, e.g. one per
  // epoch or per sweep worker.
  Rng split(std::uint64_t salt) const {
    std::uint64_t z = seed_ + salt * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace pm
