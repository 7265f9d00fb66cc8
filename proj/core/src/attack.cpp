#include "fedleak/attack.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fedleak/nn.hpp"
#include "fedleak/prng.hpp"

namespace fedleak {

namespace {

constexpr std::uint64_t kHeadTag = 0x6ead;
constexpr std::uint64_t kMaskTag = 0x3a5d;

void check_kernel_size(std::size_t k) {
  if (k % 2 == 0)
    throw std::invalid_argument(
        "kernel size must be odd for centered identity mapping, got " +
        std::to_string(k));
}

Tensor seeded_head(std::size_t num_classes, std::size_t d_out,
                   std::uint64_t seed) {
  Tensor w({num_classes, d_out});
  Prng rng(derive_seed(seed, kHeadTag));
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = rng.next_uniform(-0.05, 0.05);
  return w;
}

// Common FC2/head tail shared by every module variant.
void attach_tail(AttackModule& m, const AttackModuleConfig& cfg) {
  const std::size_t d_out = cfg.in_channels * cfg.height * cfg.width;
  m.fc2_w = Tensor({d_out, cfg.num_bins});
  m.fc2_w.fill(cfg.fc2_value);
  m.fc2_uniform = true;
  m.fc2_value = cfg.fc2_value;
  m.fc2_b = Tensor({d_out});
  m.head_w = seeded_head(cfg.num_classes, d_out, cfg.seed);
  m.head_b = Tensor({cfg.num_classes});
}

void attach_measurement(AttackModule& m, const AttackModuleConfig& cfg,
                        const std::vector<double>& cutoffs) {
  const std::size_t block = m.fc1_block.channel_count * cfg.height * cfg.width;
  m.fc1_w = Tensor({cfg.num_bins, block});
  m.fc1_w.fill(1.0 / double(cfg.height * cfg.width));
  m.fc1_uniform_rows = true;
  m.fc1_b = Tensor({cfg.num_bins});
  for (std::size_t j = 0; j < cfg.num_bins; ++j) m.fc1_b[j] = -cutoffs[j];
  m.bin_cutoffs = cutoffs;
}

}  // namespace

Tensor build_identity_set(int set_index, std::size_t c_in, std::size_t k) {
  if (set_index < 0)
    throw std::invalid_argument("identity set index must be >= 0");
  check_kernel_size(k);
  Tensor kernels({c_in, c_in, k, k});
  const std::size_t center = k / 2;
  for (std::size_t c = 0; c < c_in; ++c)
    kernels.at(c, c, center, center) = 1.0;
  return kernels;
}

std::size_t max_identity_sets(std::size_t kernels, std::size_t c_in) {
  return kernels / c_in;
}

std::vector<double> gaussian_bin_cutoffs(std::size_t num_bins, double mean,
                                         double sd) {
  if (num_bins < 1) throw std::invalid_argument("num_bins must be >= 1");
  if (!(sd > 0.0)) throw std::invalid_argument("bin sd must be > 0");
  std::vector<double> cutoffs(num_bins);
  for (std::size_t j = 0; j < num_bins; ++j) {
    const double p = (double(j) + 0.5) / double(num_bins);
    cutoffs[j] = inverse_normal_cdf(p) * sd + mean;
    if (!std::isfinite(cutoffs[j]))
      throw std::invalid_argument("non-finite bin cutoff at index " +
                                  std::to_string(j));
  }
  // FC1 biases must stay strictly negative and cutoffs strictly increasing;
  // quantiles of low-mean profiles can dip below zero, so clamp onto a tiny
  // ascending ladder. A cutoff this close to zero behaves like one at zero:
  // it is activated by any non-black image.
  double lo = 1e-9;
  for (std::size_t j = 0; j < num_bins; ++j) {
    if (cutoffs[j] < lo) cutoffs[j] = lo;
    lo = cutoffs[j] + 1e-12;
  }
  return cutoffs;
}

AttackModule build_attack_module(const AttackModuleConfig& cfg) {
  check_kernel_size(cfg.kernel_size);
  const std::size_t sets = max_identity_sets(cfg.kernels, cfg.in_channels);
  if (cfg.identity_set < 0 || std::size_t(cfg.identity_set) >= sets)
    throw std::invalid_argument(
        "identity set " + std::to_string(cfg.identity_set) +
        " exceeds kernel budget (" + std::to_string(cfg.kernels) +
        " kernels support " + std::to_string(sets) + " sets)");

  AttackModule m;
  m.in_channels = cfg.in_channels;
  m.height = cfg.height;
  m.width = cfg.width;
  m.stride = 1;
  m.padding = int(cfg.kernel_size / 2);
  m.conv_kind = ConvKind::identity_set;
  m.identity_set = cfg.identity_set;
  m.masked = false;

  m.conv_w = Tensor({cfg.kernels, cfg.in_channels, cfg.kernel_size,
                     cfg.kernel_size});
  m.conv_b = Tensor({cfg.kernels});
  const std::size_t center = cfg.kernel_size / 2;
  const std::size_t base = std::size_t(cfg.identity_set) * cfg.in_channels;
  for (std::size_t c = 0; c < cfg.in_channels; ++c)
    m.conv_w.at(base + c, c, center, center) = 1.0;

  m.fc1_block = {base, cfg.in_channels, cfg.kernels};
  attach_measurement(m, cfg,
                     gaussian_bin_cutoffs(cfg.num_bins, cfg.bias_mean,
                                          cfg.bias_sd));
  attach_tail(m, cfg);
  return m;
}

AttackModule build_masked_module(const AttackModuleConfig& cfg,
                                 MaskStyle style) {
  check_kernel_size(cfg.kernel_size);
  AttackModule m;
  m.in_channels = cfg.in_channels;
  m.height = cfg.height;
  m.width = cfg.width;
  m.stride = 1;
  m.padding = int(cfg.kernel_size / 2);
  m.masked = true;
  m.mask_style = style;
  m.identity_set = -1;
  m.conv_w = Tensor({cfg.kernels, cfg.in_channels, cfg.kernel_size,
                     cfg.kernel_size});
  m.conv_b = Tensor({cfg.kernels});
  m.fc1_block = {0, cfg.in_channels, cfg.kernels};
  m.conv_kind = ConvKind::general;

  const std::size_t center = cfg.kernel_size / 2;
  const double c_in = double(cfg.in_channels);
  const double ksq = double(cfg.kernel_size * cfg.kernel_size);

  switch (style) {
    case MaskStyle::zero_kernels:
      // All-zero kernels: the conv output is zero, biases never fire.
      attach_measurement(m, cfg,
                         gaussian_bin_cutoffs(cfg.num_bins, cfg.bias_mean,
                                              cfg.bias_sd));
      break;
    case MaskStyle::negative_conv_bias: {
      // Arbitrary kernels in [-1,1]; a bias of -(k^2 * C_in) bounds any
      // unit-range response below zero, so the conv ReLU outputs zero.
      Prng rng(derive_seed(cfg.seed, kMaskTag, std::uint64_t(style)));
      for (std::size_t i = 0; i < m.conv_w.size(); ++i)
        m.conv_w[i] = rng.next_uniform(-1.0, 1.0);
      m.conv_b.fill(-(ksq * c_in));
      attach_measurement(m, cfg,
                         gaussian_bin_cutoffs(cfg.num_bins, cfg.bias_mean,
                                              cfg.bias_sd));
      break;
    }
    case MaskStyle::fc_bias_block: {
      // Live pushforward, but every FC1 bias sits below -(C_in + 1); the
      // measurement never exceeds C_in so no bin can activate.
      m.conv_kind = ConvKind::identity_set;
      for (std::size_t c = 0; c < cfg.in_channels; ++c)
        m.conv_w.at(c, c, center, center) = 1.0;
      std::vector<double> cutoffs(cfg.num_bins);
      for (std::size_t j = 0; j < cfg.num_bins; ++j)
        cutoffs[j] = (c_in + 1.0) + double(j) * 1e-9;
      attach_measurement(m, cfg, cutoffs);
      break;
    }
    case MaskStyle::decoy_kernel: {
      // One benign live kernel no FC1 weight reads, so the module output is
      // non-zero while the attack gradients stay zero.
      m.conv_w.at(cfg.kernels - 1, 0, center, center) = 1.0;
      std::vector<double> cutoffs(cfg.num_bins);
      for (std::size_t j = 0; j < cfg.num_bins; ++j)
        cutoffs[j] = (c_in + 1.0) + double(j) * 1e-9;
      attach_measurement(m, cfg, cutoffs);
      break;
    }
  }

  attach_tail(m, cfg);
  if (style == MaskStyle::decoy_kernel) m.fc2_b.fill(cfg.fc2_value);
  return m;
}

AttackModule build_flat_imprint_module(const AttackModuleConfig& cfg) {
  AttackModule m;
  m.in_channels = cfg.in_channels;
  m.height = cfg.height;
  m.width = cfg.width;
  m.conv_kind = ConvKind::none;
  m.identity_set = -1;
  m.masked = false;
  m.fc1_block = {0, cfg.in_channels, cfg.in_channels};
  attach_measurement(m, cfg,
                     gaussian_bin_cutoffs(cfg.num_bins, cfg.bias_mean,
                                          cfg.bias_sd));
  attach_tail(m, cfg);
  return m;
}

std::vector<Tensor> build_stride_identity_kernels(std::size_t c_in,
                                                  std::size_t num_layers) {
  std::vector<Tensor> layers;
  layers.reserve(num_layers);
  std::size_t in_ch = c_in;
  for (std::size_t l = 0; l < num_layers; ++l) {
    Tensor k({in_ch * 4, in_ch, 2, 2});
    for (std::size_t c = 0; c < in_ch; ++c) {
      for (std::size_t corner = 0; corner < 4; ++corner)
        k.at(c * 4 + corner, c, corner / 2, corner % 2) = 1.0;
    }
    layers.push_back(std::move(k));
    in_ch *= 4;
  }
  return layers;
}

std::size_t required_kernels(std::size_t c_in, std::size_t num_layers) {
  std::size_t n = c_in;
  for (std::size_t l = 0; l < num_layers; ++l) n *= 4;
  return n;
}

Tensor stride_downsample(const Tensor& image,
                         const std::vector<Tensor>& layers) {
  Tensor cur = image;
  for (const Tensor& k : layers) {
    if (cur.dim(1) % 2 != 0 || cur.dim(2) % 2 != 0)
      throw std::invalid_argument(
          "stride_downsample: spatial dims must be divisible by 2, got " +
          cur.shape_str());
    Tensor biases({k.dim(0)});
    cur = conv2d_forward(cur, k, biases, 2, 0);
  }
  return cur;
}

Tensor stride_inverse(const Tensor& output, std::size_t c_in,
                      std::size_t num_layers, std::size_t height,
                      std::size_t width) {
  Tensor cur = output;
  std::size_t ch = required_kernels(c_in, num_layers);
  std::size_t h = height, w = width;
  for (std::size_t l = 0; l < num_layers; ++l) h /= 2, w /= 2;
  if (cur.dim(0) != ch || cur.dim(1) != h || cur.dim(2) != w)
    throw std::invalid_argument("stride_inverse: unexpected shape " +
                                cur.shape_str());
  for (std::size_t l = num_layers; l > 0; --l) {
    const std::size_t in_ch = ch / 4;
    Tensor prev({in_ch, h * 2, w * 2});
    for (std::size_t c = 0; c < in_ch; ++c)
      for (std::size_t corner = 0; corner < 4; ++corner)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            prev.at(c, 2 * i + corner / 2, 2 * j + corner % 2) =
                cur.at(c * 4 + corner, i, j);
    cur = std::move(prev);
    ch = in_ch;
    h *= 2;
    w *= 2;
  }
  return cur;
}

std::vector<ClientAssignment> plan_assignments(std::size_t num_clients,
                                               std::size_t num_sets,
                                               std::size_t clients_per_model) {
  if (clients_per_model < 1)
    throw std::invalid_argument("clients_per_model must be >= 1");
  return plan_assignments(num_clients, num_sets,
                          {{clients_per_model,
                            (num_clients + clients_per_model - 1) /
                                std::max<std::size_t>(clients_per_model, 1)}});
}

std::vector<ClientAssignment> plan_assignments(
    std::size_t num_clients, std::size_t num_sets,
    const std::vector<std::pair<std::size_t, std::size_t>>& plan) {
  std::vector<ClientAssignment> out(num_clients);
  std::size_t client = 0;
  int group = 0;
  for (const auto& [size, count] : plan) {
    if (size < 1) throw std::invalid_argument("plan group size must be >= 1");
    for (std::size_t g = 0; g < count; ++g) {
      if (std::size_t(group) >= num_sets || client >= num_clients) break;
      for (std::size_t s = 0; s < size && client < num_clients; ++s) {
        out[client] = {int(client), group, group, false};
        ++client;
      }
      ++group;
    }
  }
  for (; client < num_clients; ++client)
    out[client] = {int(client), -1, -1, true};
  return out;
}

std::size_t num_groups(const std::vector<ClientAssignment>& assignments) {
  int hi = -1;
  for (const auto& a : assignments)
    if (!a.masked && a.share_group > hi) hi = a.share_group;
  return std::size_t(hi + 1);
}

ParamCount param_count_separated(std::size_t clients, std::size_t c_in,
                                 std::size_t h, std::size_t w,
                                 std::size_t bins_per_client, std::size_t k) {
  const std::size_t kernels = clients * c_in;
  const std::size_t d = c_in * h * w;
  ParamCount p;
  p.first_layer_weights = h * w * kernels * bins_per_client;
  p.fc2_weights = bins_per_client * d;
  p.conv_weights_full = kernels * c_in * k * k;
  p.conv_weights_single_slice = kernels * k * k;
  p.bias_params = kernels + bins_per_client + d;
  p.total_added = p.first_layer_weights + p.fc2_weights + p.conv_weights_full;
  // Per deployed model: one FC1 block, the (dense) FC2, and the C_in ones.
  p.nonzero_added = bins_per_client * c_in * h * w + p.fc2_weights + c_in;
  p.nonzero_fraction = double(p.nonzero_added) / double(p.total_added);
  return p;
}

ParamCount param_count_flat(std::size_t total_bins, std::size_t c_in,
                            std::size_t h, std::size_t w) {
  const std::size_t d = c_in * h * w;
  ParamCount p;
  p.first_layer_weights = d * total_bins;
  p.fc2_weights = total_bins * d;
  p.bias_params = total_bins + d;
  p.total_added = p.first_layer_weights + p.fc2_weights;
  p.nonzero_added = p.total_added;
  p.nonzero_fraction = 1.0;
  return p;
}

}  // namespace fedleak
