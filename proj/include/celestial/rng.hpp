#pragma once

#include <cstdint>

namespace celestial {

/// Counter-based generator: every value is a pure function of
/// (key, stream, counter), so draws can be reproduced out of order and from
/// any worker without shared state. Mixing uses the SplitMix64 finalizer.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t key, std::uint64_t stream) noexcept
      : key_(key), stream_(stream) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
    return mix(mix(mix(key_) ^ stream_) ^ counter);
  }

  constexpr std::uint64_t next() noexcept { return at(counter_++); }

  /// Uniform double in [0, 1) with 53 bits of resolution.
  constexpr double uniform() noexcept {
    return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0);
  }

  constexpr double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n); n must be positive.
  constexpr std::uint64_t below(std::uint64_t n) noexcept {
    // Multiply-shift bound; bias is < n / 2^64.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

 private:
  std::uint64_t key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace celestial
