#pragma once

#include <cstdint>
#include <random>
#include <utility>

namespace pforge {

/// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Seeded generator with implementation-independent draws.
///
/// std::mt19937_64's output sequence is fixed by the standard, but the
/// std:: distributions are not, so every draw here is derived from raw
/// engine output to keep corpora and payloads identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed, 0)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Uniform integer in [lo, hi].
  std::uint64_t between(std::uint64_t lo, std::uint64_t hi) { return lo + below(hi - lo + 1); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint8_t byte() { return static_cast<std::uint8_t>(next() >> 56); }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pforge
