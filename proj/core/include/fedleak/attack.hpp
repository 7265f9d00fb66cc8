#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fedleak/module.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

struct AttackModuleConfig {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t kernels = 256;      // K
  std::size_t kernel_size = 3;    // odd; padding is (k-1)/2
  std::size_t num_bins = 256;
  int identity_set = 0;
  double bias_mean = 1.5;  // cutoff distribution, negated into FC1 biases
  double bias_sd = 0.5;
  std::uint64_t seed = 1;  // head initialization; shared by all clients
  std::size_t num_classes = 10;
  double fc2_value = 0.01;
};

// Kernels of one identity mapping set: C_in kernels of shape C_in x k x k,
// kernel c holding a single centered 1 in input-channel slice c.
Tensor build_identity_set(int set_index, std::size_t c_in, std::size_t k);

std::size_t max_identity_sets(std::size_t kernels, std::size_t c_in);

// Bin cutoffs at Gaussian quantiles ((j+0.5)/num_bins), sorted ascending.
// Non-positive cutoffs are clamped to a tiny ascending ladder so FC1 biases
// stay strictly negative and cutoffs strictly increasing.
std::vector<double> gaussian_bin_cutoffs(std::size_t num_bins, double mean,
                                         double sd);

AttackModule build_attack_module(const AttackModuleConfig& cfg);

// Module whose FC1 weight and bias gradients are exactly zero for any batch
// with pixels in [0, 1].
AttackModule build_masked_module(const AttackModuleConfig& cfg,
                                 MaskStyle style);

// Baseline without conv separation: FC1 reads the flattened raw input with
// the same measurement/bin scheme. cfg.num_bins is the total bin count.
AttackModule build_flat_imprint_module(const AttackModuleConfig& cfg);

// Lossless stride-2 downsampling stack: layer l maps C_in*4^l channels to
// C_in*4^(l+1), each 2x2/stride-2 kernel selecting one corner of one input
// channel. The composition is an invertible rearrangement of the input.
std::vector<Tensor> build_stride_identity_kernels(std::size_t c_in,
                                                  std::size_t num_layers);
std::size_t required_kernels(std::size_t c_in, std::size_t num_layers);

// Applies the layered kernels (stride 2, no padding).
Tensor stride_downsample(const Tensor& image,
                         const std::vector<Tensor>& layers);
// Exact inverse rearrangement back to C_in x H x W.
Tensor stride_inverse(const Tensor& output, std::size_t c_in,
                      std::size_t num_layers, std::size_t height,
                      std::size_t width);

struct ClientAssignment {
  int client_id = -1;
  int share_group = -1;   // -1 for masked clients
  int identity_set = -1;  // -1 for masked clients
  bool masked = true;
};

// Round-robin grouping of clients onto identity sets, `clients_per_model`
// clients sharing each module; clients beyond the set budget are masked.
std::vector<ClientAssignment> plan_assignments(std::size_t num_clients,
                                               std::size_t num_sets,
                                               std::size_t clients_per_model);

// Mixed plan: (group size, group count) pairs, e.g. {{2,15},{1,70}} covers
// 100 clients with 85 sets.
std::vector<ClientAssignment> plan_assignments(
    std::size_t num_clients, std::size_t num_sets,
    const std::vector<std::pair<std::size_t, std::size_t>>& plan);

std::size_t num_groups(const std::vector<ClientAssignment>& assignments);

struct ParamCount {
  std::size_t first_layer_weights = 0;  // conv output (or raw input) -> FC1
  std::size_t fc2_weights = 0;          // FC1 -> FC2
  std::size_t conv_weights_full = 0;    // K * C_in * k * k
  std::size_t conv_weights_single_slice = 0;  // K * k * k
  std::size_t bias_params = 0;          // conv + FC1 + FC2 biases
  std::size_t total_added = 0;          // weights, full conv counting
  std::size_t nonzero_added = 0;        // per deployed model
  double nonzero_fraction = 0.0;
};

ParamCount param_count_separated(std::size_t clients, std::size_t c_in,
                                 std::size_t h, std::size_t w,
                                 std::size_t bins_per_client, std::size_t k);
ParamCount param_count_flat(std::size_t total_bins, std::size_t c_in,
                            std::size_t h, std::size_t w);

}  // namespace fedleak
