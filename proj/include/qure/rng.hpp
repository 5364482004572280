#pragma once

#include <cstdint>

namespace qure {

// SplitMix64. Small, fully specified, and identical on every platform, which
// keeps sampled negatives and shuffles bit-reproducible.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform integer in [0, n); n > 0. Rejection removes modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform double in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// Seed of an independent stream derived from a base seed and stream labels.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  SplitMix64 m(seed ^ 0xD6E8FEB86659FD93ULL);
  std::uint64_t s = m.next() ^ (a * 0x9E3779B97F4A7C15ULL);
  SplitMix64 m2(s);
  s = m2.next() ^ (b * 0xC2B2AE3D27D4EB4FULL);
  return SplitMix64(s).next();
}

}  // namespace qure
