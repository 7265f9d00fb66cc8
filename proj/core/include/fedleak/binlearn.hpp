#pragma once

#include <cstddef>
#include <vector>

#include "fedleak/data.hpp"

namespace fedleak {

// One activated bin as seen by the server: the bin's cutoff, counted once
// for a clean reconstruction and twice for a suspected overlap (the exact
// multiplicity is not observable).
struct BinObservation {
  double cutoff = 0.0;
  int count = 1;
};

// Dataset-agnostic cutoff profile: the measurement lives in [0, C], so
// center the bins there. Matches the 1-channel (0.5, 0.25) and 3-channel
// (1.5, 0.5) defaults.
BrightnessProfile agnostic_init(std::size_t c_in);

// Re-estimates the brightness profile from observed activations: weighted
// mean and sample sd of the observed cutoffs, sd floored at sd_min. An
// empty log returns the prior unchanged. The prior is fully replaced, not
// blended.
BrightnessProfile update_profile(const std::vector<BinObservation>& log,
                                 const BrightnessProfile& prior,
                                 double sd_min = 0.05);

}  // namespace fedleak
