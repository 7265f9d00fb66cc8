#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fedleak/data.hpp"
#include "fedleak/fedsim.hpp"
#include "fedleak/metrics.hpp"
#include "fedleak/reconstruct.hpp"

namespace fedleak {

struct ExperimentConfig {
  // dataset: synth | synth_mixture | synth_noniid | mnist_like | mnist |
  // cifar10 | cifar100. mnist_like is synth_mixture with a built-in
  // class-ink mixture over 1x28x28 images.
  std::string dataset = "synth";
  std::size_t channels = 3, height = 32, width = 32;
  std::size_t num_classes = 10;
  BrightnessProfile synth_profile{1.5, 0.5};
  BrightnessMixture mixture;
  // synth_noniid: per-client profiles drawn uniformly from these ranges
  // (unless explicit client_profiles are given).
  double noniid_mean_lo = 0.15, noniid_mean_hi = 0.85;
  double noniid_sd_lo = 0.04, noniid_sd_hi = 0.10;
  std::vector<BrightnessProfile> client_profiles;
  std::string mnist_images, mnist_labels;
  std::vector<std::string> cifar_paths;

  std::size_t num_clients = 100;
  std::size_t batch_size = 64;
  std::size_t bins_per_client = 0;  // 0 = auto: 4 units per batch image
  std::size_t kernels = 0;          // 0 = auto: C_in * number of groups
  std::size_t kernel_size = 3;
  std::size_t clients_per_model = 1;
  std::vector<std::pair<std::size_t, std::size_t>> plan;  // mixed plan
  std::size_t rounds = 1;

  std::string bias_init = "auto";  // auto | agnostic | explicit
  BrightnessProfile bias_explicit{0.0, 0.0};

  std::uint64_t seed = 1;
  std::string aggregation = "secure";  // plain | secure
  double noise_sd = 0.0;
  std::string overlap_detection = "heuristic";  // oracle | heuristic
  std::string reconstruction = "biasfree";      // biasfree | withbias
  double scale_max = 1.0;
  double ssim_threshold = 0.90;
  double tau_overlap = 0.05;
  double fixed_point_gain = 4096.0;
  std::string masked_style = "zero_kernels";

  bool flat_imprint = false;  // baseline design: bins_per_client is the
                              // total bin count of the single shared module
  std::string output_dir;     // empty: no files written
  bool save_reconstructions = false;
  int threads = 0;  // 0 = hardware concurrency

  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
  std::string to_json_text() const;

  std::size_t effective_bins() const {
    return bins_per_client ? bins_per_client : 4 * batch_size;
  }
  void validate() const;  // throws naming the offending field
};

struct RoundSummary {
  std::size_t round = 0;
  LeakageSummary leakage;
  double eps_empty = 0.0;
  double min_occupied_diff = 0.0;
  double max_empty_diff = 0.0;
};

struct ExperimentResult {
  std::vector<RoundSummary> rounds;
  std::vector<std::vector<BrightnessProfile>> deployed_profiles;  // per round
  std::string output_dir;
};

// Runs the configured experiment: per round, deploy client-specific modules,
// simulate FedSGD, aggregate per share group, reconstruct from the aggregate
// FC1 weight gradients, evaluate against the ledger, and (multi-round)
// re-estimate per-group brightness profiles from bin activations. Writes
// summary.csv / report.csv / profiles.csv / results.json under output_dir
// when one is set.
ExperimentResult run_experiment(const ExperimentConfig& config);

enum class SweepAxis { clients, batch, clients_per_model, fc_size };

SweepAxis parse_sweep_axis(const std::string& name);

struct SweepPoint {
  std::size_t value = 0;
  double mandrake_rate = 0.0;  // leakage over attacked images
  double mandrake_rate_total = 0.0;
  std::size_t mandrake_leaked = 0;
  // Flat-imprint baseline in the three comparison settings; negative when
  // not evaluated (axis without a defined baseline, or above the bin cap).
  double flat_same_bins = -1.0;
  double flat_same_total = -1.0;
  double flat_same_nonzero = -1.0;
};

struct SweepOptions {
  bool baselines = true;
  std::size_t baseline_max_bins = 16384;  // cap for the same-bins setting
  std::vector<std::uint64_t> seeds;       // empty: just config.seed
};

// One run per axis value (averaged over seeds when several are given);
// writes sweep.csv under config.output_dir when set.
std::vector<SweepPoint> run_sweep(const ExperimentConfig& config,
                                  SweepAxis axis,
                                  const std::vector<std::size_t>& values,
                                  const SweepOptions& options = {});

// Renders the reconstruction grids recorded by a previous run (requires
// save_reconstructions) into <results_dir>/grids/.
int dump_images(const std::string& results_dir);

}  // namespace fedleak
