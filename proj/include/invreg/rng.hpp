#pragma once

// Named, counter-derived random streams. Every random decision in the library
// is drawn from a stream derived from one root seed, so that serial and
// parallel runs see identical numbers.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace invreg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class SeedStream {
 public:
  explicit SeedStream(std::uint64_t root) : key_(splitmix64(root)) {}

  /// Sub-stream for a named component ("data", "init", "augmentation", "defense", ...).
  SeedStream named(std::string_view name) const { return SeedStream(key_, fnv1a(name)); }
  /// Sub-stream for a counter (example index, iteration, ...).
  SeedStream child(std::uint64_t counter) const { return SeedStream(key_, counter); }
  SeedStream child(std::initializer_list<std::uint64_t> counters) const {
    SeedStream s = *this;
    for (auto c : counters) s = s.child(c);
    return s;
  }

  std::uint64_t key() const { return key_; }

 private:
  SeedStream(std::uint64_t parent, std::uint64_t salt)
      : key_(splitmix64(parent ^ splitmix64(salt + 0x632be59bd9b4e019ULL))) {}
  std::uint64_t key_;
};

/// Portable generator: identical sequences on every standard library.
class Rng {
 public:
  explicit Rng(const SeedStream& stream) : engine_(stream.key()) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  long uniform_int(long lo, long hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v;
    do v = engine_(); while (v >= limit);
    return lo + static_cast<long>(v % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second value).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace invreg
