#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace fedleak {

// Fixed-point codec over the ring of 64-bit unsigned integers. Values are
// rounded to the nearest multiple of 2^-frac_bits and carried in two's
// complement; sums wrap mod 2^64 and decode back to signed reals.
struct FixedPointCodec {
  int frac_bits = 20;
  double clamp_range = double(1 << 20);  // values must satisfy |v| <= range

  double scale() const { return double(std::uint64_t(1) << frac_bits); }
};

struct MaskedUpdate {
  int client_id = -1;
  std::vector<std::uint64_t> payload;
};

std::vector<std::uint64_t> encode(const std::vector<double>& values,
                                  const FixedPointCodec& codec);

// Decodes a modular sum of `num_clients` encoded vectors. num_clients is
// used only to verify ring headroom.
std::vector<double> decode(const std::vector<std::uint64_t>& values,
                           const FixedPointCodec& codec,
                           std::size_t num_clients);

// One shared seed per unordered client pair {i, j}.
class PairwiseSeeds {
 public:
  PairwiseSeeds() = default;
  // Derives all pair seeds for n clients from a master seed.
  static PairwiseSeeds derive(std::size_t num_clients, std::uint64_t master);

  void set(std::size_t i, std::size_t j, std::uint64_t seed);
  std::uint64_t get(std::size_t i, std::size_t j) const;  // throws if missing

 private:
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> seeds_;
};

// Client i adds the PRG stream of seed {i,j} for j > i and subtracts it for
// j < i (mod 2^64), so the modular sum of all masked payloads equals the
// modular sum of the unmasked payloads bit-exactly.
std::vector<MaskedUpdate> mask_updates(
    const std::vector<std::vector<std::uint64_t>>& encoded,
    const PairwiseSeeds& seeds);

std::vector<std::uint64_t> aggregate(const std::vector<MaskedUpdate>& masked);

}  // namespace fedleak
