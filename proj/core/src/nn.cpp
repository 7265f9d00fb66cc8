#include "fedleak/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedleak {

namespace {

std::size_t out_extent(std::size_t in, int pad, std::size_t k, int stride) {
  return (in + 2 * std::size_t(pad) - k) / std::size_t(stride) + 1;
}

// Writes the post-ReLU conv output for channels [block.channel_begin,
// channel_begin + channel_count) into y (flattened channel-major).
void conv_block_forward(const AttackModule& m, const Tensor& image,
                        Tensor& y) {
  const std::size_t hw = m.height * m.width;
  switch (m.conv_kind) {
    case ConvKind::none: {
      for (std::size_t i = 0; i < image.size(); ++i)
        y[i] = image[i];
      return;
    }
    case ConvKind::identity_set: {
      // The set's kernels copy the input channels verbatim; stride 1 and
      // centered padding leave the spatial grid unchanged.
      for (std::size_t i = 0; i < image.size(); ++i)
        y[i] = std::max(0.0, image[i]);
      return;
    }
    case ConvKind::general: {
      const Tensor pre =
          conv2d_forward(image, m.conv_w, m.conv_b, m.stride, m.padding);
      const std::size_t out_hw = pre.size() / pre.dim(0);
      if (out_hw != hw) {
        throw std::invalid_argument(
            "module forward: conv output spatial size " +
            std::to_string(out_hw) + " does not match module H*W " +
            std::to_string(hw));
      }
      const double* src =
          pre.data() + m.fc1_block.channel_begin * hw;
      for (std::size_t i = 0; i < m.fc1_block.channel_count * hw; ++i)
        y[i] = std::max(0.0, src[i]);
      return;
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels,
                      const Tensor& biases, int stride, int padding) {
  if (input.rank() != 3)
    throw std::invalid_argument("conv2d_forward: input must be C_in x H x W, got " +
                                input.shape_str());
  if (kernels.rank() != 4)
    throw std::invalid_argument(
        "conv2d_forward: kernels must be K x C_in x k x k, got " +
        kernels.shape_str());
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t k_count = kernels.dim(0), kh = kernels.dim(2),
                    kw = kernels.dim(3);
  if (kernels.dim(1) != c_in)
    throw std::invalid_argument(
        "conv2d_forward: kernel channel dimension " +
        std::to_string(kernels.dim(1)) + " != input channels " +
        std::to_string(c_in));
  if (biases.size() != k_count)
    throw std::invalid_argument("conv2d_forward: bias count " +
                                std::to_string(biases.size()) +
                                " != kernel count " + std::to_string(k_count));
  if (stride < 1) throw std::invalid_argument("conv2d_forward: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d_forward: padding must be >= 0");
  if (kh > h + 2 * std::size_t(padding) || kw > w + 2 * std::size_t(padding))
    throw std::invalid_argument(
        "conv2d_forward: kernel size " + std::to_string(kh) +
        " exceeds padded input extent " +
        std::to_string(h + 2 * std::size_t(padding)));

  const std::size_t oh = out_extent(h, padding, kh, stride);
  const std::size_t ow = out_extent(w, padding, kw, stride);
  Tensor out({k_count, oh, ow});

  const double* x = input.data();
  for (std::size_t k = 0; k < k_count; ++k) {
    const double* ker = kernels.data() + k * c_in * kh * kw;
    double* o = out.data() + k * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const long base_r = long(i) * stride - padding;
      for (std::size_t j = 0; j < ow; ++j) {
        const long base_c = long(j) * stride - padding;
        double acc = biases[k];
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t a = 0; a < kh; ++a) {
            const long r = base_r + long(a);
            if (r < 0 || r >= long(h)) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const long cc = base_c + long(b);
              if (cc < 0 || cc >= long(w)) continue;
              acc += ker[(c * kh + a) * kw + b] * x[(c * h + r) * w + cc];
            }
          }
        }
        o[i * ow + j] = acc;
      }
    }
  }
  return out;
}

Tensor fc_forward(const Tensor& input, const Tensor& weights,
                  const Tensor& biases) {
  if (weights.rank() != 2)
    throw std::invalid_argument("fc_forward: weights must be U x D, got " +
                                weights.shape_str());
  const std::size_t units = weights.dim(0), d = weights.dim(1);
  if (input.size() != d)
    throw std::invalid_argument("fc_forward: input length " +
                                std::to_string(input.size()) +
                                " != weight columns " + std::to_string(d));
  if (biases.size() != units)
    throw std::invalid_argument("fc_forward: bias length " +
                                std::to_string(biases.size()) +
                                " != weight rows " + std::to_string(units));
  Tensor out({units});
  const double* x = input.data();
  for (std::size_t u = 0; u < units; ++u) {
    const double* row = weights.data() + u * d;
    double acc = biases[u];
    for (std::size_t i = 0; i < d; ++i) acc += row[i] * x[i];
    out[u] = acc;
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::max(0.0, out[i]);
  return out;
}

std::pair<double, Tensor> softmax_ce(const Tensor& logits, std::size_t label) {
  if (label >= logits.size())
    throw std::invalid_argument("softmax_ce: label " + std::to_string(label) +
                                " out of range for " +
                                std::to_string(logits.size()) + " classes");
  const double m = logits.max();
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    z += std::exp(logits[i] - m);
  const double loss = m + std::log(z) - logits[label];
  Tensor d({logits.size()});
  for (std::size_t i = 0; i < logits.size(); ++i)
    d[i] = std::exp(logits[i] - m) / z;
  d[label] -= 1.0;
  return {loss, std::move(d)};
}

ModuleForward module_forward(const AttackModule& m, const Tensor& image,
                             std::size_t label) {
  if (image.size() != m.input_size())
    throw std::invalid_argument("module_forward: image size " +
                                image.shape_str() + " does not match module " +
                                std::to_string(m.in_channels) + "x" +
                                std::to_string(m.height) + "x" +
                                std::to_string(m.width));
  ModuleForward f;
  const std::size_t bins = m.num_bins();
  const std::size_t bs = m.block_size();
  const std::size_t d_out = m.fc2_b.size();

  f.y = Tensor({bs});
  conv_block_forward(m, image, f.y);

  f.a = Tensor({bins});
  if (m.fc1_uniform_rows) {
    // Every row is the constant 1/(H*W) over the block: the measurement is
    // the summed-channel mean intensity of the pushed-through image.
    const double meas = f.y.sum() / double(m.height * m.width);
    for (std::size_t j = 0; j < bins; ++j) f.a[j] = meas + m.fc1_b[j];
  } else {
    f.a = fc_forward(f.y, m.fc1_w, m.fc1_b);
  }
  f.r = relu(f.a);

  f.z = Tensor({d_out});
  if (m.fc2_uniform) {
    const double s = m.fc2_value * f.r.sum();
    for (std::size_t o = 0; o < d_out; ++o) f.z[o] = s + m.fc2_b[o];
  } else {
    f.z = fc_forward(f.r, m.fc2_w, m.fc2_b);
  }

  f.logits = fc_forward(f.z, m.head_w, m.head_b);
  auto [loss, dlogits] = softmax_ce(f.logits, label);
  f.loss = loss;
  return f;
}

namespace {

// Accumulates `scale` times the gradient of the loss at (image, label) into
// acc. Shared by the single-image and batch entry points.
double accumulate_gradients(const AttackModule& m, const Tensor& image,
                            std::size_t label, LayerGrads& acc, double scale) {
  const std::size_t bins = m.num_bins();
  const std::size_t bs = m.block_size();
  const std::size_t d_out = m.fc2_b.size();
  const std::size_t nc = m.num_classes();
  const std::size_t hw = m.height * m.width;

  ModuleForward f = module_forward(m, image, label);
  auto [loss, dlogits] = softmax_ce(f.logits, label);

  // head
  for (std::size_t c = 0; c < nc; ++c) {
    const double g = scale * dlogits[c];
    acc.head_b[c] += g;
    double* row = acc.head_w.data() + c * d_out;
    const double* z = f.z.data();
    for (std::size_t o = 0; o < d_out; ++o) row[o] += g * z[o];
  }
  Tensor dz({d_out});
  for (std::size_t c = 0; c < nc; ++c) {
    const double g = dlogits[c];
    const double* row = m.head_w.data() + c * d_out;
    for (std::size_t o = 0; o < d_out; ++o) dz[o] += g * row[o];
  }

  // fc2; activated bins form a contiguous prefix only for the binning
  // construction, so loop over all bins and skip dead ones.
  const double dz_sum = dz.sum();
  for (std::size_t o = 0; o < d_out; ++o) acc.fc2_b[o] += scale * dz[o];
  Tensor dr({bins});
  if (m.fc2_uniform) {
    const double v = m.fc2_value * dz_sum;
    for (std::size_t j = 0; j < bins; ++j) dr[j] = v;
  } else {
    for (std::size_t j = 0; j < bins; ++j) {
      double accv = 0.0;
      for (std::size_t o = 0; o < d_out; ++o)
        accv += m.fc2_w[o * bins + j] * dz[o];
      dr[j] = accv;
    }
  }
  // dz (x) r, walked row-major so the writes stay contiguous; r is sparse
  // (a prefix of the bins for the binning construction).
  std::size_t r_hi = 0;
  for (std::size_t j = 0; j < bins; ++j)
    if (f.r[j] != 0.0) r_hi = j + 1;
  if (r_hi > 0) {
    const double* r = f.r.data();
    for (std::size_t o = 0; o < d_out; ++o) {
      const double gz = scale * dz[o];
      if (gz == 0.0) continue;
      double* row = acc.fc2_w.data() + o * bins;
      for (std::size_t j = 0; j < r_hi; ++j) row[j] += gz * r[j];
    }
  }

  // fc1
  Tensor da({bins});
  bool any_active = false;
  for (std::size_t j = 0; j < bins; ++j) {
    if (f.a[j] > 0.0) {
      da[j] = dr[j];
      any_active = true;
    }
  }
  double da_sum = 0.0;
  for (std::size_t j = 0; j < bins; ++j) {
    if (da[j] == 0.0) continue;
    acc.fc1_b[j] += scale * da[j];
    da_sum += da[j];
    const double g = scale * da[j];
    double* row = acc.fc1_w.data() + j * bs;
    const double* y = f.y.data();
    for (std::size_t i = 0; i < bs; ++i) row[i] += g * y[i];
  }

  // conv (none for flat modules; zero when no bin activated since dy = 0)
  if (m.conv_kind == ConvKind::none || !any_active) return loss;

  Tensor dy({bs});
  if (m.fc1_uniform_rows) {
    const double v = da_sum / double(hw);
    dy.fill(v);
  } else {
    for (std::size_t j = 0; j < bins; ++j) {
      if (da[j] == 0.0) continue;
      const double g = da[j];
      const double* row = m.fc1_w.data() + j * bs;
      for (std::size_t i = 0; i < bs; ++i) dy[i] += g * row[i];
    }
  }

  // Backprop through the conv ReLU: gradient flows only where the
  // pre-activation was positive. For identity kernels the pre-activation is
  // the input pixel itself.
  const std::size_t kh = m.conv_w.dim(2), kw = m.conv_w.dim(3);
  const std::size_t c_in = m.in_channels, h = m.height, w = m.width;
  const std::size_t oh = out_extent(h, m.padding, kh, m.stride);
  const std::size_t ow = out_extent(w, m.padding, kw, m.stride);
  const double* x = image.data();

  Tensor pre;  // conv pre-activations for block channels (general path)
  if (m.conv_kind == ConvKind::general)
    pre = conv2d_forward(image, m.conv_w, m.conv_b, m.stride, m.padding);

  for (std::size_t bc = 0; bc < m.fc1_block.channel_count; ++bc) {
    const std::size_t k = m.fc1_block.channel_begin + bc;
    const double* dyc = dy.data() + bc * oh * ow;
    const double* prec = (m.conv_kind == ConvKind::general)
                             ? pre.data() + k * oh * ow
                             : x + bc * h * w;
    double* gw = acc.conv_w.data() + k * c_in * kh * kw;
    double gb = 0.0;
    for (std::size_t i = 0; i < oh; ++i) {
      const long base_r = long(i) * m.stride - m.padding;
      for (std::size_t j = 0; j < ow; ++j) {
        const double up = prec[i * ow + j] > 0.0 ? dyc[i * ow + j] : 0.0;
        if (up == 0.0) continue;
        gb += up;
        const long base_c = long(j) * m.stride - m.padding;
        const double g = scale * up;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t a = 0; a < kh; ++a) {
            const long r = base_r + long(a);
            if (r < 0 || r >= long(h)) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const long cc = base_c + long(b);
              if (cc < 0 || cc >= long(w)) continue;
              gw[(c * kh + a) * kw + b] += g * x[(c * h + r) * w + cc];
            }
          }
        }
      }
    }
    acc.conv_b[k] += scale * gb;
  }
  return loss;
}

}  // namespace

LayerGrads LayerGrads::zeros_like(const AttackModule& m) {
  LayerGrads g;
  if (m.conv_kind != ConvKind::none) {
    g.conv_w = Tensor(m.conv_w.shape());
    g.conv_b = Tensor(m.conv_b.shape());
  }
  g.fc1_w = Tensor({m.num_bins(), m.block_size()});
  g.fc1_b = Tensor({m.num_bins()});
  g.fc1_block = m.fc1_block;
  g.fc2_w = Tensor(m.fc2_w.shape());
  g.fc2_b = Tensor(m.fc2_b.shape());
  g.head_w = Tensor(m.head_w.shape());
  g.head_b = Tensor(m.head_b.shape());
  return g;
}

void LayerGrads::add(const LayerGrads& other) {
  if (!(fc1_block == other.fc1_block))
    throw std::invalid_argument("LayerGrads::add: fc1 block mismatch");
  if (!conv_w.empty()) conv_w.add(other.conv_w);
  if (!conv_b.empty()) conv_b.add(other.conv_b);
  fc1_w.add(other.fc1_w);
  fc1_b.add(other.fc1_b);
  fc2_w.add(other.fc2_w);
  fc2_b.add(other.fc2_b);
  head_w.add(other.head_w);
  head_b.add(other.head_b);
}

void LayerGrads::scale(double s) {
  conv_w.scale(s);
  conv_b.scale(s);
  fc1_w.scale(s);
  fc1_b.scale(s);
  fc2_w.scale(s);
  fc2_b.scale(s);
  head_w.scale(s);
  head_b.scale(s);
}

std::size_t LayerGrads::flat_size() const {
  const std::size_t hw =
      fc1_block.channel_count ? fc1_w.dim(1) / fc1_block.channel_count : 0;
  return conv_w.size() + conv_b.size() +
         fc1_b.size() * fc1_block.channel_total * hw + fc1_b.size() +
         fc2_w.size() + fc2_b.size() + head_w.size() + head_b.size();
}

LayerGrads module_backward(const AttackModule& m, const Tensor& image,
                           std::size_t label) {
  LayerGrads g = LayerGrads::zeros_like(m);
  accumulate_gradients(m, image, label, g, 1.0);
  return g;
}

double module_backward_batch(const AttackModule& m,
                             const std::vector<Tensor>& images,
                             const std::vector<int>& labels, LayerGrads& acc) {
  if (images.empty() || images.size() != labels.size())
    throw std::invalid_argument(
        "module_backward_batch: images/labels size mismatch");
  const double scale = 1.0 / double(images.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i)
    loss += scale * accumulate_gradients(m, images[i],
                                         std::size_t(labels[i]), acc, scale);
  return loss;
}

}  // namespace fedleak
