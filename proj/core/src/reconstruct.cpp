#include "fedleak/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "fedleak/data.hpp"

namespace fedleak {

std::vector<GroupSlice> deaggregate(
    const LayerGrads& aggregate,
    const std::vector<ClientAssignment>& assignments, std::size_t c_in) {
  if (!aggregate.fc1_block.covers_all())
    throw std::invalid_argument(
        "deaggregate: aggregate must carry the full FC1 width");
  const std::size_t full_cols = aggregate.fc1_w.dim(1);
  const std::size_t rows = aggregate.fc1_w.dim(0);
  const std::size_t hw = full_cols / aggregate.fc1_block.channel_total;
  const std::size_t block_cols = c_in * hw;

  std::map<int, GroupSlice> groups;
  std::set<int> used_sets;
  for (const ClientAssignment& a : assignments) {
    if (a.masked) continue;
    auto it = groups.find(a.share_group);
    if (it == groups.end()) {
      if (!used_sets.insert(a.identity_set).second)
        throw std::invalid_argument(
            "deaggregate: identity set " + std::to_string(a.identity_set) +
            " is claimed by more than one share group (overlapping channel "
            "blocks)");
      GroupSlice s;
      s.share_group = a.share_group;
      s.identity_set = a.identity_set;
      s.clients.push_back(a.client_id);
      groups.emplace(a.share_group, std::move(s));
    } else {
      if (it->second.identity_set != a.identity_set)
        throw std::invalid_argument(
            "deaggregate: share group " + std::to_string(a.share_group) +
            " maps to multiple identity sets");
      it->second.clients.push_back(a.client_id);
    }
  }

  std::vector<GroupSlice> out;
  out.reserve(groups.size());
  for (auto& [gid, slice] : groups) {
    const std::size_t begin = std::size_t(slice.identity_set) * block_cols;
    if (begin + block_cols > full_cols)
      throw std::invalid_argument("deaggregate: identity set " +
                                  std::to_string(slice.identity_set) +
                                  " exceeds the FC1 width");
    slice.w = Tensor({rows, block_cols});
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = aggregate.fc1_w.data() + r * full_cols + begin;
      double* dst = slice.w.data() + r * block_cols;
      std::copy(src, src + block_cols, dst);
    }
    out.push_back(std::move(slice));
  }
  return out;
}

double eps_empty_for_noise(double noise_sd, std::size_t fan_in) {
  if (noise_sd <= 0.0) return 1e-12;
  return std::max(1e-12, 6.0 * noise_sd * std::sqrt(double(fan_in)));
}

namespace {

// d = row i minus row i+1 of the slice (topmost row stands alone).
void row_difference(const Tensor& slice, std::size_t i, std::size_t bins,
                    std::vector<double>& d) {
  const std::size_t cols = slice.dim(1);
  const double* a = slice.data() + i * cols;
  if (i + 1 < bins) {
    const double* b = slice.data() + (i + 1) * cols;
    for (std::size_t c = 0; c < cols; ++c) d[c] = a[c] - b[c];
  } else {
    for (std::size_t c = 0; c < cols; ++c) d[c] = a[c];
  }
}

}  // namespace

std::vector<BinOutcome> reconstruct_biasfree(const Tensor& slice,
                                             const std::vector<double>& cutoffs,
                                             std::size_t c_in, std::size_t h,
                                             std::size_t w, double scale_max,
                                             double eps_empty) {
  const std::size_t bins = slice.dim(0);
  const std::size_t cols = slice.dim(1);
  if (bins != cutoffs.size())
    throw std::invalid_argument("reconstruct_biasfree: " +
                                std::to_string(bins) + " slice rows vs " +
                                std::to_string(cutoffs.size()) + " cutoffs");
  if (cols != c_in * h * w)
    throw std::invalid_argument("reconstruct_biasfree: slice columns " +
                                std::to_string(cols) + " != C*H*W");

  std::vector<BinOutcome> out(bins);
  std::vector<double> d(cols);
  for (std::size_t i = 0; i < bins; ++i) {
    BinOutcome& o = out[i];
    o.bin = i;
    o.cutoff = cutoffs[i];
    row_difference(slice, i, bins, d);
    double pos = 0.0, neg = 0.0;
    for (double v : d) {
      if (v > pos) pos = v;
      if (-v > neg) neg = -v;
    }
    const double m = std::max(pos, neg);
    o.max_abs_diff = m;
    if (m < eps_empty) {
      o.kind = BinOutcomeKind::empty;
      continue;
    }
    o.kind = BinOutcomeKind::image;
    o.sign_mix = std::min(pos, neg) / m;
    o.scale_max_used = scale_max;
    o.image = Tensor({c_in, h, w});
    const double inv = scale_max / m;
    for (std::size_t c = 0; c < cols; ++c)
      o.image[c] = std::fabs(d[c]) * inv;
  }
  return out;
}

std::vector<BinOutcome> reconstruct_withbias(const Tensor& slice_w,
                                             const Tensor& slice_b,
                                             const std::vector<double>& cutoffs,
                                             std::size_t c_in, std::size_t h,
                                             std::size_t w, bool coupled) {
  if (coupled)
    throw CoupledBiasError(
        "bias-gradient reconstruction requested on aggregated updates: bias "
        "gradients are coupled across clients and cannot be de-aggregated");
  const std::size_t bins = slice_w.dim(0);
  const std::size_t cols = slice_w.dim(1);
  if (slice_b.size() != bins)
    throw std::invalid_argument("reconstruct_withbias: bias slice length " +
                                std::to_string(slice_b.size()) + " != " +
                                std::to_string(bins) + " bins");
  if (cols != c_in * h * w)
    throw std::invalid_argument("reconstruct_withbias: slice columns " +
                                std::to_string(cols) + " != C*H*W");

  std::vector<BinOutcome> out(bins);
  std::vector<double> d(cols);
  for (std::size_t i = 0; i < bins; ++i) {
    BinOutcome& o = out[i];
    o.bin = i;
    o.cutoff = cutoffs[i];
    row_difference(slice_w, i, bins, d);
    const double db =
        (i + 1 < bins) ? slice_b[i] - slice_b[i + 1] : slice_b[i];
    double m = 0.0;
    for (double v : d) m = std::max(m, std::fabs(v));
    o.max_abs_diff = m;
    if (std::fabs(db) < 1e-12) {
      o.kind = BinOutcomeKind::empty;
      continue;
    }
    o.kind = BinOutcomeKind::image;
    o.image = Tensor({c_in, h, w});
    for (std::size_t c = 0; c < cols; ++c) o.image[c] = d[c] / db;
    o.scale_max_used = o.image.max();
  }
  return out;
}

BinOutcomeKind classify_overlap(const BinOutcome& outcome, double cutoff_lo,
                                double cutoff_hi, OverlapMode mode,
                                const ReconstructOptions& opt,
                                int oracle_occupancy) {
  if (outcome.kind == BinOutcomeKind::empty) return BinOutcomeKind::empty;
  if (mode == OverlapMode::oracle) {
    if (oracle_occupancy < 0)
      throw std::invalid_argument(
          "classify_overlap: oracle mode needs ledger occupancy");
    return oracle_occupancy > 1 ? BinOutcomeKind::overlap_suspected
                                : BinOutcomeKind::image;
  }
  // A clean single is one gradient scalar times a non-negative image, so the
  // pre-abs difference is single-signed.
  if (outcome.sign_mix > opt.tau_sign) return BinOutcomeKind::overlap_suspected;
  // Scale consistency: some true max pixel M in (0, 1] must place the
  // image's brightness inside [cutoff_lo, cutoff_hi). Achievable brightness
  // tops out at the normalized image's own summed-channel mean.
  const double top = summed_channel_mean(outcome.image) /
                     (outcome.scale_max_used > 0 ? outcome.scale_max_used : 1.0);
  if (top < cutoff_lo - opt.tau_overlap)
    return BinOutcomeKind::overlap_suspected;
  (void)cutoff_hi;  // the upper edge is not binding: M < 1 can always lower h
  return BinOutcomeKind::image;
}

void finish_group_report(GroupReport& rep, const std::vector<double>& cutoffs,
                         const ReconstructOptions& opt,
                         const std::vector<int>* oracle_occupancy) {
  rep.min_occupied_diff = std::numeric_limits<double>::infinity();
  rep.max_empty_diff = 0.0;
  for (std::size_t i = 0; i < rep.bins.size(); ++i) {
    BinOutcome& o = rep.bins[i];
    if (o.kind == BinOutcomeKind::empty) {
      rep.max_empty_diff = std::max(rep.max_empty_diff, o.max_abs_diff);
      continue;
    }
    rep.min_occupied_diff = std::min(rep.min_occupied_diff, o.max_abs_diff);
    const double hi = (i + 1 < cutoffs.size())
                          ? cutoffs[i + 1]
                          : std::numeric_limits<double>::infinity();
    const int occ = oracle_occupancy ? (*oracle_occupancy)[i] : -1;
    o.kind = classify_overlap(o, cutoffs[i], hi, opt.overlap, opt, occ);
    rep.observations.push_back(
        {cutoffs[i], o.kind == BinOutcomeKind::overlap_suspected ? 2 : 1});
  }
}

GroupReport reconstruct_group(int share_group, int identity_set,
                              std::vector<int> clients, const Tensor& slice,
                              const std::vector<double>& cutoffs,
                              std::size_t c_in, std::size_t h, std::size_t w,
                              const ReconstructOptions& opt,
                              const std::vector<int>* oracle_occupancy) {
  GroupReport rep;
  rep.share_group = share_group;
  rep.identity_set = identity_set;
  rep.clients = std::move(clients);
  rep.bins = reconstruct_biasfree(slice, cutoffs, c_in, h, w, opt.scale_max,
                                  opt.eps_empty);
  finish_group_report(rep, cutoffs, opt, oracle_occupancy);
  return rep;
}

std::map<std::pair<int, int>, std::vector<int>> attribute(
    const ReconstructionReport& report) {
  std::map<std::pair<int, int>, std::vector<int>> out;
  for (const GroupReport& g : report.groups) {
    for (const BinOutcome& o : g.bins) {
      if (o.kind == BinOutcomeKind::empty) continue;
      std::vector<int> ids = g.clients;
      std::sort(ids.begin(), ids.end());
      out[{g.share_group, int(o.bin)}] = std::move(ids);
    }
  }
  return out;
}

}  // namespace fedleak
