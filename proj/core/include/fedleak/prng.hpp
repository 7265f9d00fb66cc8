#pragma once

#include <cstdint>

namespace fedleak {

// Counter-based pseudo-random generator built on the splitmix64 finalizer.
// Constants are the published splitmix64 values (Steele, Lea & Flood 2014):
// increment 0x9E3779B97F4A7C15 and mixers 0xBF58476D1CE4E5B9 /
// 0x94D049BB133111EB. Not cryptographic; chosen for reproducibility and
// avalanche quality. The same stream is produced for a given (seed, index)
// pair on any platform.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  // Value at an absolute stream position, independent of generator state.
  static std::uint64_t at(std::uint64_t seed, std::uint64_t index) {
    return mix(seed + (index + 1) * 0x9E3779B97F4A7C15ull);
  }

  // Uniform double in [0, 1) using the top 53 bits.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in (0, 1), safe as an inverse-CDF argument.
  double next_open_double() {
    return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Standard normal via the inverse CDF; deterministic for a given seed.
  double next_normal();

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a master seed and up to three
// tags (purpose, client, round, ...). Used everywhere a reproducible
// sub-stream is needed so that parallel execution order cannot affect
// results.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                          std::uint64_t b = 0, std::uint64_t c = 0);

// Inverse of the standard normal CDF (Wichura's AS241 algorithm, double
// precision). Domain (0, 1); used both for bin-cutoff placement and for
// normal sampling by inverse transform.
double inverse_normal_cdf(double p);

}  // namespace fedleak
