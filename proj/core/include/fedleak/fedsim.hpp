#pragma once

#include <cstdint>
#include <vector>

#include "fedleak/attack.hpp"
#include "fedleak/data.hpp"
#include "fedleak/module.hpp"
#include "fedleak/secagg.hpp"

namespace fedleak {

enum class Aggregation {
  plain,
  secure,         // fixed-point encode -> modular sum -> decode
  secure_masked,  // additionally applies pairwise additive masks; the
                  // aggregate is bit-identical to `secure` by construction
};

struct RoundConfig {
  std::size_t num_clients = 1;
  std::size_t batch_size = 1;
  std::size_t rounds = 1;
  std::uint64_t seed = 1;
  double noise_sd = 0.0;
  Aggregation aggregation = Aggregation::plain;
  FixedPointCodec codec;
  // Calibration gain applied before fixed-point encoding and removed after
  // decoding (a power of two, so the scaling itself is exact). Gradients of
  // the inserted module are small relative to the codec's 2^-20 step; the
  // gain keeps quantization far below the reconstruction signal while the
  // decoded-sum error stays within the N * 2^-(frac_bits+1) bound.
  double fixed_point_gain = 4096.0;
};

struct GradientUpdate {
  int client_id = -1;
  LayerGrads grads;
};

// Mean gradient of the batch through the client's module.
GradientUpdate client_step(const AttackModule& m, const ImageBatch& batch);

// Adds i.i.d. Gaussian noise over the update's stored parameters
// (client-side defense model). sd = 0 is the identity.
void add_noise(GradientUpdate& update, double sd, std::uint64_t seed);

// Deterministic random-access noise field over the flat parameter index;
// both aggregation paths draw from it so plain and grouped execution see
// bit-identical noise.
double noise_at(std::uint64_t seed, int client, std::uint64_t index);

struct LedgerImage {
  Tensor image;
  int label = 0;
  int bin = -1;  // index of the largest cutoff below brightness; -1 if none
  double brightness = 0.0;  // summed-channel mean
};

struct ClientLedger {
  int client_id = -1;
  int share_group = -1;
  bool masked = true;
  std::vector<LedgerImage> images;
};

// Evaluation-only ground truth; never visible to the reconstruction path in
// non-oracle modes.
struct RoundLedger {
  std::vector<ClientLedger> clients;
};

// Assignments plus the concrete modules they refer to. All attacked clients
// of a share group receive the bit-identical module instance.
struct Deployment {
  std::vector<ClientAssignment> assignments;
  std::vector<AttackModule> group_modules;  // indexed by share_group
  AttackModule masked_module;
  bool any_masked = false;

  const AttackModule& module_for(const ClientAssignment& a) const {
    return a.masked ? masked_module : group_modules[std::size_t(a.share_group)];
  }
};

struct RoundResult {
  GradientUpdate aggregate;  // fc1_w widened to the full layer
  RoundLedger ledger;
};

// One FedSGD round: per-client batch gradients, optional defense noise, and
// aggregation. The ledger records every image with its true bin index.
RoundResult run_round(const Deployment& deployment,
                      std::vector<ImageBatch> batches,
                      const RoundConfig& config);

// Stable flat ordering: conv_w, conv_b, fc1_w (full width), fc1_b, fc2_w,
// fc2_b, head_w, head_b.
std::vector<double> flatten(const LayerGrads& g);
LayerGrads unflatten(const std::vector<double>& flat,
                     const LayerGrads& shape_like);

// fc1_w block widened to the full layer width (zeros elsewhere).
LayerGrads widen_fc1(const LayerGrads& g);

// Sum of same-block updates via fixed-point encode/modular-sum/decode;
// models Dec(sum Enc(g_i)) parameter by parameter. Noise contributions for
// `extra_noise_clients` absent clients can be folded into fc1_w by the
// caller via noise_at.
LayerGrads quantized_sum(const std::vector<const LayerGrads*>& updates,
                         const FixedPointCodec& codec, double gain);

}  // namespace fedleak
