#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "fedleak/module.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

// Cross-correlation (no kernel flip) of a C_in x H x W input with K kernels
// of shape C_in x k x k, plus per-kernel bias. Output is K x H' x W' with
// H' = (H + 2*padding - k) / stride + 1.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernels,
                      const Tensor& biases, int stride, int padding);

// output[u] = sum_d weights[u, d] * input[d] + biases[u]
Tensor fc_forward(const Tensor& input, const Tensor& weights,
                  const Tensor& biases);

Tensor relu(const Tensor& input);

// Softmax cross-entropy against an integer label. Returns the loss and the
// gradient with respect to the logits (softmax(logits) - onehot(label)).
std::pair<double, Tensor> softmax_ce(const Tensor& logits, std::size_t label);

// Intermediate activations of a module forward pass, kept for backprop and
// for tests that inspect measurements directly.
struct ModuleForward {
  Tensor y;        // post-ReLU conv output restricted to the FC1 block
  Tensor a;        // FC1 pre-activations (measurement - cutoff)
  Tensor r;        // relu(a)
  Tensor z;        // FC2 output
  Tensor logits;   // head output
  double loss = 0.0;
};

ModuleForward module_forward(const AttackModule& m, const Tensor& image,
                             std::size_t label);

// Exact analytic gradients of the loss for one image. The dense reference
// path; identity-set modules take a shortcut for the conv stage that yields
// the same values.
LayerGrads module_backward(const AttackModule& m, const Tensor& image,
                           std::size_t label);

// Mean gradient over a batch, accumulated in place into `acc` scaled by
// 1/batch_size. Returns the mean loss.
double module_backward_batch(const AttackModule& m,
                             const std::vector<Tensor>& images,
                             const std::vector<int>& labels, LayerGrads& acc);

}  // namespace fedleak
