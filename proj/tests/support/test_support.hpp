#pragma once

// Independent oracles for the test suite. Everything here is deliberately
// written as directly as possible (nested loops, byte-level parsing) and
// stays independent of the library implementation paths it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedleak/module.hpp"
#include "fedleak/nn.hpp"
#include "fedleak/prng.hpp"
#include "fedleak/tensor.hpp"

namespace testsup {

using fedleak::AttackModule;
using fedleak::Tensor;

// Quadruple-nested-loop cross-correlation.
inline Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor& b,
                          int stride, int pad) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t kn = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({kn, oh, ow});
  for (std::size_t kk = 0; kk < kn; ++kk)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = b[kk];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t bb = 0; bb < kw; ++bb) {
              const long r = long(i) * stride - pad + long(a);
              const long cc = long(j) * stride - pad + long(bb);
              if (r < 0 || r >= long(h) || cc < 0 || cc >= long(w)) continue;
              acc += k.at(kk, c, a, bb) * x.at(c, std::size_t(r), std::size_t(cc));
            }
        out.at(kk, i, j) = acc;
      }
  return out;
}

inline Tensor fc_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t u = w.dim(0), d = w.dim(1);
  Tensor out({u});
  for (std::size_t i = 0; i < u; ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < d; ++j) acc += w.at(i, j) * x[j];
    out[i] = acc;
  }
  return out;
}

// Central finite difference of the module loss w.r.t. one parameter entry.
inline double fd_loss(AttackModule& m, Tensor& param, std::size_t idx,
                      const Tensor& image, std::size_t label, double h) {
  const double orig = param[idx];
  param[idx] = orig + h;
  const double lp = fedleak::module_forward(m, image, label).loss;
  param[idx] = orig - h;
  const double lm = fedleak::module_forward(m, image, label).loss;
  param[idx] = orig;
  return (lp - lm) / (2.0 * h);
}

// Singleton-bin count from brightness values alone; the reconstruction
// engine must agree with this exactly.
inline std::size_t singleton_oracle(const std::vector<double>& brightness,
                                    const std::vector<double>& cutoffs) {
  std::vector<int> count(cutoffs.size(), 0);
  for (double h : brightness) {
    int bin = -1;
    for (std::size_t j = 0; j < cutoffs.size() && cutoffs[j] < h; ++j)
      bin = int(j);
    if (bin >= 0) count[std::size_t(bin)] += 1;
  }
  std::size_t singles = 0;
  for (int c : count) singles += (c == 1);
  return singles;
}

// Byte-level IDX image parser kept separate from the library loader.
inline std::vector<std::vector<std::uint8_t>> idx_images_oracle(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  auto u32 = [&f]() {
    std::uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
  };
  if (u32() != 2051) throw std::runtime_error("oracle: bad magic");
  const std::uint32_t n = u32(), rows = u32(), cols = u32();
  std::vector<std::vector<std::uint8_t>> out(n);
  for (auto& im : out) {
    im.resize(std::size_t(rows) * cols);
    f.read(reinterpret_cast<char*>(im.data()), std::streamsize(im.size()));
  }
  if (!f) throw std::runtime_error("oracle: truncated");
  return out;
}

// Minimal P5/P6 reader independent of data.cpp.
inline std::vector<std::uint8_t> pnm_bytes_oracle(const std::string& path,
                                                  std::size_t& w,
                                                  std::size_t& h,
                                                  std::size_t& channels) {
  std::ifstream f(path, std::ios::binary);
  std::string magic;
  std::size_t maxval;
  f >> magic >> w >> h >> maxval;
  f.get();
  channels = magic == "P5" ? 1 : 3;
  std::vector<std::uint8_t> data(w * h * channels);
  f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size()));
  if (!f) throw std::runtime_error("oracle: truncated pnm");
  return data;
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j])
      ++i;
    else
      ++j;
    const double fa = double(i) / double(a.size());
    const double fb = double(j) / double(b.size());
    d = std::max(d, std::fabs(fa - fb));
  }
  return d;
}

// Small dense module with no structural shortcuts; every path exercised by
// the gradient checker goes through the general code.
inline AttackModule make_random_module(std::uint64_t seed,
                                       std::size_t c_in = 1,
                                       std::size_t hw = 6,
                                       std::size_t kernels = 3,
                                       std::size_t bins = 4,
                                       std::size_t classes = 3) {
  fedleak::Prng rng(seed);
  AttackModule m;
  m.in_channels = c_in;
  m.height = hw;
  m.width = hw;
  m.stride = 1;
  m.padding = 1;
  m.conv_kind = fedleak::ConvKind::general;
  m.fc1_uniform_rows = false;
  m.fc2_uniform = false;
  m.conv_w = Tensor({kernels, c_in, 3, 3});
  for (std::size_t i = 0; i < m.conv_w.size(); ++i)
    m.conv_w[i] = rng.next_uniform(-0.5, 0.5);
  m.conv_b = Tensor({kernels});
  for (std::size_t i = 0; i < kernels; ++i)
    m.conv_b[i] = rng.next_uniform(-0.2, 0.2);
  m.fc1_block = {0, kernels, kernels};
  const std::size_t cols = kernels * hw * hw;
  m.fc1_w = Tensor({bins, cols});
  for (std::size_t i = 0; i < m.fc1_w.size(); ++i)
    m.fc1_w[i] = rng.next_uniform(-0.1, 0.1);
  m.fc1_b = Tensor({bins});
  for (std::size_t i = 0; i < bins; ++i)
    m.fc1_b[i] = rng.next_uniform(-0.5, 0.5);
  const std::size_t d_out = c_in * hw * hw;
  m.fc2_w = Tensor({d_out, bins});
  for (std::size_t i = 0; i < m.fc2_w.size(); ++i)
    m.fc2_w[i] = rng.next_uniform(-0.2, 0.2);
  m.fc2_b = Tensor({d_out});
  for (std::size_t i = 0; i < d_out; ++i)
    m.fc2_b[i] = rng.next_uniform(-0.1, 0.1);
  m.head_w = Tensor({classes, d_out});
  for (std::size_t i = 0; i < m.head_w.size(); ++i)
    m.head_w[i] = rng.next_uniform(-0.05, 0.05);
  m.head_b = Tensor({classes});
  for (std::size_t j = 0; j < bins; ++j) m.bin_cutoffs.push_back(double(j));
  return m;
}

inline Tensor make_random_image(std::uint64_t seed, std::size_t c,
                                std::size_t h, std::size_t w, double lo = 0.05,
                                double hi = 0.95) {
  fedleak::Prng rng(seed);
  Tensor t({c, h, w});
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = rng.next_uniform(lo, hi);
  return t;
}

// True when the module's activations sit safely away from every ReLU kink
// for this input, so central differences at step h are trustworthy.
inline bool fd_safe(const AttackModule& m, const Tensor& image,
                    std::size_t label, double margin = 1e-3) {
  const auto f = fedleak::module_forward(m, image, label);
  for (std::size_t i = 0; i < f.a.size(); ++i)
    if (std::fabs(f.a[i]) < margin) return false;
  const Tensor pre = fedleak::conv2d_forward(image, m.conv_w, m.conv_b,
                                             m.stride, m.padding);
  for (std::size_t i = 0; i < pre.size(); ++i)
    if (std::fabs(pre[i]) < margin) return false;
  return true;
}

}  // namespace testsup
