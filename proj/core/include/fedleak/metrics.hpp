#pragma once

#include <cstddef>
#include <vector>

#include "fedleak/fedsim.hpp"
#include "fedleak/reconstruct.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

// 10 * log10(1 / MSE) for unit dynamic range; +infinity when MSE is 0.
double psnr(const Tensor& a, const Tensor& b);

// Mean local SSIM with an 11x11 Gaussian window (sd 1.5), K1=0.01, K2=0.03,
// dynamic range 1, computed per channel and averaged. Images smaller than
// the window fall back to whole-image statistics.
double ssim(const Tensor& a, const Tensor& b);

enum class MatchMetric { ssim, psnr };

// Greedy max-metric assignment of reconstructions to distinct ground-truth
// images; returns the chosen truth index per reconstruction (-1 when the
// candidates run out).
std::vector<int> match_reconstructions(const std::vector<Tensor>& recons,
                                       const std::vector<Tensor>& truth,
                                       MatchMetric metric);

struct LeakageSummary {
  std::size_t leaked_count = 0;
  std::size_t attacked_images = 0;
  std::size_t total_images = 0;
  double leakage_rate_attacked = 0.0;
  double leakage_rate_total = 0.0;

  // Per-category reconstruction quality (correct = single occupancy,
  // overlap = multiple occupants). PSNR entries are capped at 300 dB before
  // averaging so exact reconstructions keep the means finite.
  double mean_ssim_correct = 0.0, mean_psnr_correct = 0.0;
  double mean_ssim_overlap = 0.0, mean_psnr_overlap = 0.0;
  double mean_ssim_total = 0.0, mean_psnr_total = 0.0;
  std::size_t correct_bins = 0, overlap_bins = 0;

  void finalize();  // turns the accumulated sums into rates and means
};

// An image counts as leaked iff it is the sole ledger occupant of its bin
// within its share group AND its reconstruction reaches SSIM >= threshold
// after both sides are normalized to max 1.
LeakageSummary leakage_account(const ReconstructionReport& report,
                               const RoundLedger& ledger,
                               double ssim_threshold = 0.90);

// Per-group accumulation used by the streaming engine; `summary` fields
// hold running sums until finalize().
void leakage_account_group(const GroupReport& group,
                           const std::vector<const ClientLedger*>& clients,
                           double ssim_threshold, LeakageSummary& summary,
                           std::vector<double>* bin_ssim = nullptr,
                           std::vector<double>* bin_psnr = nullptr,
                           std::vector<int>* bin_occupancy = nullptr,
                           std::vector<bool>* bin_leaked = nullptr);

}  // namespace fedleak
