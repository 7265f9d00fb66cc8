#include "fedleak/secagg.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fedleak/prng.hpp"

namespace fedleak {

std::vector<std::uint64_t> encode(const std::vector<double>& values,
                                  const FixedPointCodec& codec) {
  if (codec.frac_bits <= 0 || codec.frac_bits >= 40)
    throw std::invalid_argument("FixedPointCodec: frac_bits must be in (0, 40)");
  const double s = codec.scale();
  std::vector<std::uint64_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!(std::fabs(v) <= codec.clamp_range))
      throw std::invalid_argument("encode: element " + std::to_string(i) +
                                  " (" + std::to_string(v) +
                                  ") exceeds clamp range " +
                                  std::to_string(codec.clamp_range));
    const long long q = llround(v * s);
    out[i] = static_cast<std::uint64_t>(q);  // two's complement wrap
  }
  return out;
}

std::vector<double> decode(const std::vector<std::uint64_t>& values,
                           const FixedPointCodec& codec,
                           std::size_t num_clients) {
  // |sum| <= N * clamp * 2^frac must fit in the signed half of the ring.
  const double headroom = double(num_clients) * codec.clamp_range *
                          codec.scale();
  if (headroom >= 0x1.0p63)
    throw std::invalid_argument("decode: " + std::to_string(num_clients) +
                                " clients overflow the 64-bit ring at these "
                                "codec settings");
  const double s = codec.scale();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = double(static_cast<std::int64_t>(values[i])) / s;
  return out;
}

PairwiseSeeds PairwiseSeeds::derive(std::size_t num_clients,
                                    std::uint64_t master) {
  PairwiseSeeds s;
  for (std::size_t i = 0; i < num_clients; ++i)
    for (std::size_t j = i + 1; j < num_clients; ++j)
      s.set(i, j, derive_seed(master, 0x9a1c, i, j));
  return s;
}

void PairwiseSeeds::set(std::size_t i, std::size_t j, std::uint64_t seed) {
  if (i == j) throw std::invalid_argument("PairwiseSeeds: i == j");
  if (i > j) std::swap(i, j);
  seeds_[{i, j}] = seed;
}

std::uint64_t PairwiseSeeds::get(std::size_t i, std::size_t j) const {
  if (i > j) std::swap(i, j);
  auto it = seeds_.find({i, j});
  if (it == seeds_.end())
    throw std::invalid_argument("missing pairwise seed for clients " +
                                std::to_string(i) + "," + std::to_string(j));
  return it->second;
}

std::vector<MaskedUpdate> mask_updates(
    const std::vector<std::vector<std::uint64_t>>& encoded,
    const PairwiseSeeds& seeds) {
  const std::size_t n = encoded.size();
  std::vector<MaskedUpdate> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].client_id = int(i);
    out[i].payload = encoded[i];
    if (encoded[i].size() != encoded[0].size())
      throw std::invalid_argument("mask_updates: payload length mismatch");
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const std::uint64_t seed = seeds.get(i, j);
      std::vector<std::uint64_t>& p = out[i].payload;
      if (j > i) {
        for (std::size_t t = 0; t < p.size(); ++t)
          p[t] += Prng::at(seed, t);
      } else {
        for (std::size_t t = 0; t < p.size(); ++t)
          p[t] -= Prng::at(seed, t);
      }
    }
  }
  return out;
}

std::vector<std::uint64_t> aggregate(const std::vector<MaskedUpdate>& masked) {
  if (masked.empty()) return {};
  std::vector<std::uint64_t> sum(masked[0].payload.size(), 0);
  for (const MaskedUpdate& m : masked) {
    if (m.payload.size() != sum.size())
      throw std::invalid_argument("aggregate: payload length mismatch");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += m.payload[i];
  }
  return sum;
}

}  // namespace fedleak
