#include "fedleak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedleak {

namespace {
constexpr double kPsnrCap = 300.0;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("psnr: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double c = double(n - 1) / 2.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

double ssim_plane_global(const double* x, const double* y, std::size_t n) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= double(n), my /= double(n);
  double vx = 0, vy = 0, cov = 0;
  for (std::size_t i = 0; i < n; ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cov += (x[i] - mx) * (y[i] - my);
  }
  vx /= double(n), vy /= double(n), cov /= double(n);
  return ((2 * mx * my + kC1) * (2 * cov + kC2)) /
         ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

// Windowed statistics via two separable Gaussian passes.
void gauss_filter(const std::vector<double>& in, std::size_t h, std::size_t w,
                  const std::vector<double>& win, std::vector<double>& tmp,
                  std::vector<double>& out) {
  const std::size_t k = win.size();
  const std::size_t ow = w - k + 1;
  const std::size_t oh = h - k + 1;
  tmp.assign(h * ow, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += win[t] * in[i * w + j + t];
      tmp[i * ow + j] = acc;
    }
  out.assign(oh * ow, 0.0);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += win[t] * tmp[(i + t) * ow + j];
      out[i * ow + j] = acc;
    }
}

double ssim_plane(const double* x, const double* y, std::size_t h,
                  std::size_t w) {
  const std::size_t k = 11;
  if (h < k || w < k) return ssim_plane_global(x, y, h * w);
  static const std::vector<double> win = gaussian_window(k, 1.5);

  const std::size_t n = h * w;
  std::vector<double> xs(x, x + n), ys(y, y + n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  std::vector<double> tmp, mx, my, mxx, myy, mxy;
  gauss_filter(xs, h, w, win, tmp, mx);
  gauss_filter(ys, h, w, win, tmp, my);
  gauss_filter(xx, h, w, win, tmp, mxx);
  gauss_filter(yy, h, w, win, tmp, myy);
  gauss_filter(xy, h, w, win, tmp, mxy);

  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cov = mxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + kC1) * (2 * cov + kC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
  }
  return total / double(mx.size());
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("ssim: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  if (a.rank() != 3)
    throw std::invalid_argument("ssim: expected C x H x W, got " +
                                a.shape_str());
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch)
    total += ssim_plane(a.data() + ch * h * w, b.data() + ch * h * w, h, w);
  return total / double(c);
}

std::vector<int> match_reconstructions(const std::vector<Tensor>& recons,
                                       const std::vector<Tensor>& truth,
                                       MatchMetric metric) {
  if (recons.empty() || truth.empty())
    throw std::invalid_argument("match_reconstructions: empty inputs");
  std::vector<int> assignment(recons.size(), -1);
  std::vector<bool> taken(truth.size(), false);
  // Greedy: globally best (recon, truth) pair first, then next best among
  // the remaining, each truth image used at most once.
  struct Cand {
    double score;
    std::size_t r, t;
  };
  std::vector<Cand> cands;
  cands.reserve(recons.size() * truth.size());
  for (std::size_t r = 0; r < recons.size(); ++r)
    for (std::size_t t = 0; t < truth.size(); ++t) {
      const double s = metric == MatchMetric::ssim
                           ? ssim(recons[r], truth[t])
                           : psnr(recons[r], truth[t]);
      cands.push_back({s, r, t});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });
  std::size_t placed = 0;
  for (const Cand& c : cands) {
    if (placed == recons.size()) break;
    if (assignment[c.r] >= 0 || taken[c.t]) continue;
    assignment[c.r] = int(c.t);
    taken[c.t] = true;
    ++placed;
  }
  return assignment;
}

namespace {

Tensor normalized_to_max1(const Tensor& t) {
  Tensor out = t;
  const double m = out.max();
  if (m > 0.0) out.scale(1.0 / m);
  return out;
}

double capped(double v) { return std::min(v, kPsnrCap); }

}  // namespace

void LeakageSummary::finalize() {
  leakage_rate_attacked =
      attacked_images ? double(leaked_count) / double(attacked_images) : 0.0;
  leakage_rate_total =
      total_images ? double(leaked_count) / double(total_images) : 0.0;
  if (correct_bins) {
    mean_ssim_correct /= double(correct_bins);
    mean_psnr_correct /= double(correct_bins);
  }
  if (overlap_bins) {
    mean_ssim_overlap /= double(overlap_bins);
    mean_psnr_overlap /= double(overlap_bins);
  }
  if (correct_bins + overlap_bins) {
    mean_ssim_total /= double(correct_bins + overlap_bins);
    mean_psnr_total /= double(correct_bins + overlap_bins);
  }
}

void leakage_account_group(const GroupReport& group,
                           const std::vector<const ClientLedger*>& clients,
                           double ssim_threshold, LeakageSummary& summary,
                           std::vector<double>* bin_ssim,
                           std::vector<double>* bin_psnr,
                           std::vector<int>* bin_occupancy,
                           std::vector<bool>* bin_leaked) {
  const std::size_t bins = group.bins.size();
  std::vector<std::vector<const LedgerImage*>> occupants(bins);
  for (const ClientLedger* cl : clients) {
    summary.attacked_images += cl->images.size();
    for (const LedgerImage& im : cl->images)
      if (im.bin >= 0) occupants[std::size_t(im.bin)].push_back(&im);
  }
  if (bin_ssim) bin_ssim->assign(bins, 0.0);
  if (bin_psnr) bin_psnr->assign(bins, 0.0);
  if (bin_occupancy) bin_occupancy->assign(bins, 0);
  if (bin_leaked) bin_leaked->assign(bins, false);

  for (std::size_t i = 0; i < bins; ++i) {
    if (bin_occupancy) (*bin_occupancy)[i] = int(occupants[i].size());
    const BinOutcome& o = group.bins[i];
    if (o.kind == BinOutcomeKind::empty || occupants[i].empty()) continue;
    const Tensor recon = normalized_to_max1(o.image);
    double best_ssim = -2.0, best_psnr = 0.0;
    for (const LedgerImage* im : occupants[i]) {
      const Tensor gt = normalized_to_max1(im->image);
      const double s = ssim(recon, gt);
      if (s > best_ssim) {
        best_ssim = s;
        best_psnr = capped(psnr(recon, gt));
      }
    }
    if (bin_ssim) (*bin_ssim)[i] = best_ssim;
    if (bin_psnr) (*bin_psnr)[i] = best_psnr;
    if (occupants[i].size() == 1) {
      summary.correct_bins += 1;
      summary.mean_ssim_correct += best_ssim;
      summary.mean_psnr_correct += best_psnr;
      if (best_ssim >= ssim_threshold) {
        summary.leaked_count += 1;
        if (bin_leaked) (*bin_leaked)[i] = true;
      }
    } else {
      summary.overlap_bins += 1;
      summary.mean_ssim_overlap += best_ssim;
      summary.mean_psnr_overlap += best_psnr;
    }
    summary.mean_ssim_total += best_ssim;
    summary.mean_psnr_total += best_psnr;
  }
}

LeakageSummary leakage_account(const ReconstructionReport& report,
                               const RoundLedger& ledger,
                               double ssim_threshold) {
  LeakageSummary summary;
  for (const ClientLedger& cl : ledger.clients)
    summary.total_images += cl.images.size();

  for (const GroupReport& g : report.groups) {
    std::vector<const ClientLedger*> members;
    for (const ClientLedger& cl : ledger.clients)
      if (!cl.masked && cl.share_group == g.share_group)
        members.push_back(&cl);
    leakage_account_group(g, members, ssim_threshold, summary);
  }
  summary.finalize();
  return summary;
}

}  // namespace fedleak
