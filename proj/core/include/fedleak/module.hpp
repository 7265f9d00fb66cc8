#pragma once

#include <cstddef>
#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak {

// Column block of the first FC layer. FC1 weights are only ever non-zero on
// the conv-output channels of one identity mapping set, so both modules and
// gradients store just that block; `channel_total` remembers the width of
// the full layer for flattening and aggregation.
struct Fc1Block {
  std::size_t channel_begin = 0;
  std::size_t channel_count = 0;
  std::size_t channel_total = 0;

  bool covers_all() const {
    return channel_begin == 0 && channel_count == channel_total;
  }
  bool operator==(const Fc1Block&) const = default;
};

enum class ConvKind {
  general,       // run the full cross-correlation over all kernels
  identity_set,  // kernels are a known identity mapping set: output = input
  none,          // no conv layer; FC1 reads the flattened raw input
};

enum class MaskStyle {
  zero_kernels,
  negative_conv_bias,
  fc_bias_block,
  decoy_kernel,
};

// Full parameter set of the inserted module: conv -> ReLU -> FC1 -> ReLU ->
// FC2, plus the fixed linear head + softmax cross-entropy that stands in for
// the rest of the network. FC2 output dimension equals the input dimension
// so the module is insertable in front of any model.
struct AttackModule {
  std::size_t in_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int stride = 1;
  int padding = 0;

  Tensor conv_w;  // K x C_in x k x k (empty when conv_kind == none)
  Tensor conv_b;  // K
  Tensor fc1_w;   // num_bins x (block.channel_count * H * W)
  Tensor fc1_b;   // num_bins; always the negated bin cutoffs
  Fc1Block fc1_block;
  Tensor fc2_w;   // D_out x num_bins, every row identical
  Tensor fc2_b;   // D_out
  Tensor head_w;  // num_classes x D_out
  Tensor head_b;  // num_classes

  ConvKind conv_kind = ConvKind::general;
  int identity_set = -1;  // >=0 for attacked modules
  bool masked = false;
  MaskStyle mask_style = MaskStyle::zero_kernels;
  bool fc1_uniform_rows = false;  // rows are the constant 1/(H*W) over the block
  bool fc2_uniform = true;   // all fc2_w entries equal (builder default)
  double fc2_value = 0.0;

  std::vector<double> bin_cutoffs;  // strictly ascending

  std::size_t num_bins() const { return fc1_b.size(); }
  std::size_t input_size() const { return in_channels * height * width; }
  std::size_t block_size() const {
    return fc1_block.channel_count * height * width;
  }
  std::size_t num_classes() const { return head_b.size(); }
};

// Gradients of the scalar loss with respect to every module parameter.
// Shapes match the module's parameters; fc1_w is stored on the same block.
struct LayerGrads {
  Tensor conv_w, conv_b;
  Tensor fc1_w, fc1_b;
  Fc1Block fc1_block;
  Tensor fc2_w, fc2_b;
  Tensor head_w, head_b;

  static LayerGrads zeros_like(const AttackModule& m);
  void add(const LayerGrads& other);
  void scale(double s);
  // Total flat length with fc1_w counted at full layer width.
  std::size_t flat_size() const;
};

}  // namespace fedleak
