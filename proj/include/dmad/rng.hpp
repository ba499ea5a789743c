#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dmad {

/// Deterministic random source.
///
/// Draws come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Real-valued draws are built from the raw 64-bit words here rather
/// than through <random> distributions, whose algorithms are left to the
/// library vendor. Independent consumers (weights, data, shuffling) take their
/// own stream via split() so that changing one consumer never shifts another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Child generator whose seed mixes this seed with a stream name.
  Rng split(std::string_view stream) const { return Rng(mix(seed_ ^ fnv1a(stream))); }
  Rng split(std::uint64_t index) const { return Rng(mix(seed_ + 0x9e3779b97f4a7c15ULL * (index + 1))); }

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next() % range);
  }

  /// Box-Muller; one draw per call, the second value is discarded.
  double normal(double mean = 0.0, double stddev = 1.0);

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace dmad
