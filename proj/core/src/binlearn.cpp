#include "fedleak/binlearn.hpp"

#include <cmath>

namespace fedleak {

BrightnessProfile agnostic_init(std::size_t c_in) {
  if (c_in == 1) return {0.5, 0.25};
  return {double(c_in) * 0.5, double(c_in) / 6.0};
}

BrightnessProfile update_profile(const std::vector<BinObservation>& log,
                                 const BrightnessProfile& prior,
                                 double sd_min) {
  if (log.empty()) return prior;
  double wsum = 0.0, mean = 0.0;
  for (const BinObservation& o : log) {
    wsum += double(o.count);
    mean += double(o.count) * o.cutoff;
  }
  mean /= wsum;
  double var = 0.0;
  for (const BinObservation& o : log) {
    const double d = o.cutoff - mean;
    var += double(o.count) * d * d;
  }
  var /= wsum;
  return {mean, std::max(std::sqrt(var), sd_min)};
}

}  // namespace fedleak
