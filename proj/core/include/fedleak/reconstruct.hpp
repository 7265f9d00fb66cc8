#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedleak/attack.hpp"
#include "fedleak/binlearn.hpp"
#include "fedleak/fedsim.hpp"
#include "fedleak/module.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

// Raised when Equation-style bias-gradient reconstruction is requested in a
// context where bias gradients are coupled across clients (any aggregation
// of more than one client); this is the obstruction the weight-only path
// exists to avoid.
class CoupledBiasError : public std::runtime_error {
 public:
  explicit CoupledBiasError(const std::string& what)
      : std::runtime_error(what) {}
};

enum class BinOutcomeKind { empty, image, overlap_suspected };

struct BinOutcome {
  std::size_t bin = 0;
  double cutoff = 0.0;
  BinOutcomeKind kind = BinOutcomeKind::empty;
  Tensor image;  // C x H x W; normalized so max == scale_max_used
  double scale_max_used = 0.0;
  double max_abs_diff = 0.0;  // max |d| of the subtracted weight gradient
  double sign_mix = 0.0;      // smaller-signed magnitude / larger, pre-abs
};

struct GroupSlice {
  int share_group = -1;
  int identity_set = -1;
  std::vector<int> clients;
  Tensor w;  // num_bins x (C_in * H * W), rows in ascending cutoff order
};

// Splits the aggregate FC1 weight gradient into per-group column blocks.
// Groups must sit on disjoint identity sets. Bias gradients are coupled
// across groups and are deliberately not sliced here.
std::vector<GroupSlice> deaggregate(
    const LayerGrads& aggregate,
    const std::vector<ClientAssignment>& assignments, std::size_t c_in);

enum class OverlapMode { oracle, heuristic };

struct ReconstructOptions {
  double scale_max = 1.0;
  double eps_empty = 1e-12;
  OverlapMode overlap = OverlapMode::heuristic;
  double tau_overlap = 0.05;  // brightness-consistency margin
  double tau_sign = 0.02;     // pre-abs mixed-sign tolerance
};

// Defense noise widens what "empty" looks like; fan_in is the number of
// client updates whose noise lands in the slice.
double eps_empty_for_noise(double noise_sd, std::size_t fan_in);

// Weight-only reconstruction: per bin, d = slice[i] - slice[i+1] (topmost
// bin stands alone); empty below eps, else |d| normalized to scale_max.
std::vector<BinOutcome> reconstruct_biasfree(const Tensor& slice,
                                             const std::vector<double>& cutoffs,
                                             std::size_t c_in, std::size_t h,
                                             std::size_t w,
                                             double scale_max = 1.0,
                                             double eps_empty = 1e-12);

// Bias-gradient reconstruction (exact scale, no normalization). Only legal
// when the bias gradients belong to a single client; pass coupled=true to
// model the aggregated context and get the refusal error.
std::vector<BinOutcome> reconstruct_withbias(const Tensor& slice_w,
                                             const Tensor& slice_b,
                                             const std::vector<double>& cutoffs,
                                             std::size_t c_in, std::size_t h,
                                             std::size_t w, bool coupled);

// Decides single vs overlap for a non-empty bin. Oracle mode consults the
// ledger occupancy (evaluation only); heuristic mode uses the pre-abs sign
// mix and a brightness-interval consistency check.
BinOutcomeKind classify_overlap(const BinOutcome& outcome, double cutoff_lo,
                                double cutoff_hi, OverlapMode mode,
                                const ReconstructOptions& opt,
                                int oracle_occupancy = -1);

struct GroupReport {
  int share_group = -1;
  int identity_set = -1;
  std::vector<int> clients;
  std::vector<BinOutcome> bins;  // ascending cutoff order
  std::vector<BinObservation> observations;
  double min_occupied_diff = 0.0;  // smallest max|d| among non-empty bins
  double max_empty_diff = 0.0;     // largest max|d| among empty bins
};

struct ReconstructionReport {
  std::vector<GroupReport> groups;
  double eps_empty = 1e-12;
};

// Full per-group pipeline: reconstruct, classify every non-empty bin, emit
// bin-activation observations (overlap counted twice). oracle_occupancy,
// when provided, is indexed by bin.
GroupReport reconstruct_group(int share_group, int identity_set,
                              std::vector<int> clients, const Tensor& slice,
                              const std::vector<double>& cutoffs,
                              std::size_t c_in, std::size_t h, std::size_t w,
                              const ReconstructOptions& opt,
                              const std::vector<int>* oracle_occupancy);

// Classification + observation pass over prefilled rep.bins; shared by the
// weight-only and bias-gradient reconstruction paths.
void finish_group_report(GroupReport& rep, const std::vector<double>& cutoffs,
                         const ReconstructOptions& opt,
                         const std::vector<int>* oracle_occupancy);

// (share_group, bin) -> owning client ids. Every reconstruction traces back
// to its share group regardless of submission order.
std::map<std::pair<int, int>, std::vector<int>> attribute(
    const ReconstructionReport& report);

}  // namespace fedleak
