#include "fedleak/fedsim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fedleak/nn.hpp"
#include "fedleak/prng.hpp"

namespace fedleak {

namespace {
constexpr std::uint64_t kNoiseTag = 0x0153;
}

GradientUpdate client_step(const AttackModule& m, const ImageBatch& batch) {
  batch.validate();
  for (const Tensor& im : batch.images) {
    if (im.size() != m.input_size())
      throw std::invalid_argument("client_step: image shape " +
                                  im.shape_str() + " does not match module");
  }
  GradientUpdate u;
  u.client_id = batch.client_id;
  u.grads = LayerGrads::zeros_like(m);
  module_backward_batch(m, batch.images, batch.labels, u.grads);
  return u;
}

double noise_at(std::uint64_t seed, int client, std::uint64_t index) {
  const std::uint64_t s = derive_seed(seed, kNoiseTag, std::uint64_t(client));
  const double u = (double(Prng::at(s, index) >> 11) + 0.5) * 0x1.0p-53;
  return inverse_normal_cdf(u);
}

void add_noise(GradientUpdate& update, double sd, std::uint64_t seed) {
  if (sd == 0.0) return;
  if (sd < 0.0) throw std::invalid_argument("add_noise: sd must be >= 0");
  std::uint64_t idx = 0;
  for (Tensor* t : {&update.grads.conv_w, &update.grads.conv_b,
                    &update.grads.fc1_w, &update.grads.fc1_b,
                    &update.grads.fc2_w, &update.grads.fc2_b,
                    &update.grads.head_w, &update.grads.head_b}) {
    for (std::size_t i = 0; i < t->size(); ++i, ++idx)
      (*t)[i] += sd * noise_at(seed, update.client_id, idx);
  }
}

std::vector<double> flatten(const LayerGrads& g) {
  std::vector<double> flat;
  flat.reserve(g.flat_size());
  auto append = [&flat](const Tensor& t) {
    flat.insert(flat.end(), t.vec().begin(), t.vec().end());
  };
  append(g.conv_w);
  append(g.conv_b);
  if (g.fc1_block.covers_all()) {
    append(g.fc1_w);
  } else {
    const std::size_t rows = g.fc1_w.dim(0);
    const std::size_t bcols = g.fc1_w.dim(1);
    const std::size_t hw = bcols / g.fc1_block.channel_count;
    const std::size_t full_cols = g.fc1_block.channel_total * hw;
    const std::size_t begin = g.fc1_block.channel_begin * hw;
    std::vector<double> row(full_cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(row.begin(), row.end(), 0.0);
      const double* src = g.fc1_w.data() + r * bcols;
      for (std::size_t c = 0; c < bcols; ++c) row[begin + c] = src[c];
      flat.insert(flat.end(), row.begin(), row.end());
    }
  }
  append(g.fc1_b);
  append(g.fc2_w);
  append(g.fc2_b);
  append(g.head_w);
  append(g.head_b);
  return flat;
}

LayerGrads unflatten(const std::vector<double>& flat,
                     const LayerGrads& shape_like) {
  LayerGrads g;
  g.fc1_block = shape_like.fc1_block;
  std::size_t pos = 0;
  auto take = [&](const Tensor& like) {
    Tensor t(like.shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = flat[pos + i];
    pos += t.size();
    return t;
  };
  if (!shape_like.conv_w.empty()) {
    g.conv_w = take(shape_like.conv_w);
    g.conv_b = take(shape_like.conv_b);
  }
  const std::size_t rows = shape_like.fc1_w.dim(0);
  const std::size_t bcols = shape_like.fc1_w.dim(1);
  const std::size_t hw = bcols / shape_like.fc1_block.channel_count;
  const std::size_t full_cols = shape_like.fc1_block.channel_total * hw;
  const std::size_t begin = shape_like.fc1_block.channel_begin * hw;
  g.fc1_w = Tensor({rows, bcols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < bcols; ++c)
      g.fc1_w[r * bcols + c] = flat[pos + r * full_cols + begin + c];
  pos += rows * full_cols;
  g.fc1_b = take(shape_like.fc1_b);
  g.fc2_w = take(shape_like.fc2_w);
  g.fc2_b = take(shape_like.fc2_b);
  g.head_w = take(shape_like.head_w);
  g.head_b = take(shape_like.head_b);
  if (pos != flat.size())
    throw std::invalid_argument("unflatten: length mismatch");
  return g;
}

LayerGrads widen_fc1(const LayerGrads& g) {
  if (g.fc1_block.covers_all()) return g;
  LayerGrads out = g;
  const std::size_t rows = g.fc1_w.dim(0);
  const std::size_t bcols = g.fc1_w.dim(1);
  const std::size_t hw = bcols / g.fc1_block.channel_count;
  const std::size_t full_cols = g.fc1_block.channel_total * hw;
  const std::size_t begin = g.fc1_block.channel_begin * hw;
  out.fc1_w = Tensor({rows, full_cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < bcols; ++c)
      out.fc1_w[r * full_cols + begin + c] = g.fc1_w[r * bcols + c];
  out.fc1_block = {0, g.fc1_block.channel_total, g.fc1_block.channel_total};
  return out;
}

LayerGrads quantized_sum(const std::vector<const LayerGrads*>& updates,
                         const FixedPointCodec& codec, double gain) {
  if (updates.empty())
    throw std::invalid_argument("quantized_sum: no updates");
  const LayerGrads& first = *updates[0];
  LayerGrads out = first;  // shapes/block template

  auto sum_tensor = [&](auto member) {
    const Tensor& t0 = first.*member;
    std::vector<std::uint64_t> acc(t0.size(), 0);
    std::vector<double> scaled(t0.size());
    for (const LayerGrads* u : updates) {
      const Tensor& t = u->*member;
      if (!t.same_shape(t0))
        throw std::invalid_argument("quantized_sum: shape mismatch");
      for (std::size_t i = 0; i < t.size(); ++i) scaled[i] = t[i] * gain;
      const std::vector<std::uint64_t> enc = encode(scaled, codec);
      for (std::size_t i = 0; i < enc.size(); ++i) acc[i] += enc[i];
    }
    const std::vector<double> dec = decode(acc, codec, updates.size());
    Tensor r(t0.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = dec[i] / gain;
    return r;
  };

  if (!first.conv_w.empty()) {
    out.conv_w = sum_tensor(&LayerGrads::conv_w);
    out.conv_b = sum_tensor(&LayerGrads::conv_b);
  }
  out.fc1_w = sum_tensor(&LayerGrads::fc1_w);
  out.fc1_b = sum_tensor(&LayerGrads::fc1_b);
  out.fc2_w = sum_tensor(&LayerGrads::fc2_w);
  out.fc2_b = sum_tensor(&LayerGrads::fc2_b);
  out.head_w = sum_tensor(&LayerGrads::head_w);
  out.head_b = sum_tensor(&LayerGrads::head_b);
  return out;
}

namespace {

int bin_index_for(double brightness, const std::vector<double>& cutoffs) {
  // Largest cutoff strictly below the brightness; -1 when none is.
  int idx = -1;
  for (std::size_t j = 0; j < cutoffs.size() && cutoffs[j] < brightness; ++j)
    idx = int(j);
  return idx;
}

LayerGrads zeros_full(const AttackModule& m) {
  LayerGrads g = LayerGrads::zeros_like(m);
  const std::size_t hw = m.height * m.width;
  g.fc1_w = Tensor({m.num_bins(), m.fc1_block.channel_total * hw});
  g.fc1_block = {0, m.fc1_block.channel_total, m.fc1_block.channel_total};
  return g;
}

void add_block_into_full(LayerGrads& full, const LayerGrads& part) {
  if (!part.conv_w.empty()) {
    full.conv_w.add(part.conv_w);
    full.conv_b.add(part.conv_b);
  }
  const std::size_t rows = part.fc1_w.dim(0);
  const std::size_t bcols = part.fc1_w.dim(1);
  const std::size_t hw = bcols / part.fc1_block.channel_count;
  const std::size_t full_cols = full.fc1_w.dim(1);
  const std::size_t begin = part.fc1_block.channel_begin * hw;
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = full.fc1_w.data() + r * full_cols + begin;
    const double* src = part.fc1_w.data() + r * bcols;
    for (std::size_t c = 0; c < bcols; ++c) dst[c] += src[c];
  }
  full.fc1_b.add(part.fc1_b);
  full.fc2_w.add(part.fc2_w);
  full.fc2_b.add(part.fc2_b);
  full.head_w.add(part.head_w);
  full.head_b.add(part.head_b);
}

}  // namespace

RoundResult run_round(const Deployment& deployment,
                      std::vector<ImageBatch> batches,
                      const RoundConfig& config) {
  const std::size_t n = deployment.assignments.size();
  if (batches.size() != n)
    throw std::invalid_argument("run_round: " + std::to_string(batches.size()) +
                                " batches for " + std::to_string(n) +
                                " clients");

  std::vector<GradientUpdate> updates;
  updates.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    const ClientAssignment& a = deployment.assignments[c];
    batches[c].client_id = a.client_id;
    updates.push_back(client_step(deployment.module_for(a), batches[c]));
  }

  // Reference module for full-width shapes; all modules in a deployment
  // share layer dimensions.
  const AttackModule& ref = deployment.group_modules.empty()
                                ? deployment.masked_module
                                : deployment.group_modules[0];

  RoundResult result;
  result.aggregate.client_id = -1;

  const bool noisy = config.noise_sd > 0.0;
  if (config.aggregation == Aggregation::plain) {
    LayerGrads agg = zeros_full(ref);
    for (std::size_t c = 0; c < n; ++c)
      add_block_into_full(agg, updates[c].grads);
    if (noisy) {
      std::vector<double> flat = flatten(agg);
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t i = 0; i < flat.size(); ++i)
          flat[i] += config.noise_sd * noise_at(config.seed, int(c), i);
      agg = unflatten(flat, agg);
    }
    result.aggregate.grads = std::move(agg);
  } else {
    const double gain = config.fixed_point_gain;
    std::vector<std::vector<std::uint64_t>> payloads;
    std::vector<std::uint64_t> acc;
    const LayerGrads full_template = zeros_full(ref);
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<double> flat = flatten(widen_fc1(updates[c].grads));
      if (noisy)
        for (std::size_t i = 0; i < flat.size(); ++i)
          flat[i] += config.noise_sd * noise_at(config.seed, int(c), i);
      for (double& v : flat) v *= gain;
      std::vector<std::uint64_t> enc = encode(flat, config.codec);
      if (config.aggregation == Aggregation::secure_masked) {
        payloads.push_back(std::move(enc));
      } else {
        if (acc.empty()) acc.assign(enc.size(), 0);
        for (std::size_t i = 0; i < enc.size(); ++i) acc[i] += enc[i];
      }
    }
    if (config.aggregation == Aggregation::secure_masked) {
      const PairwiseSeeds seeds = PairwiseSeeds::derive(n, config.seed);
      acc = aggregate(mask_updates(payloads, seeds));
    }
    std::vector<double> dec = decode(acc, config.codec, n);
    for (double& v : dec) v /= gain;
    result.aggregate.grads = unflatten(dec, full_template);
  }

  // Ground-truth ledger.
  result.ledger.clients.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    const ClientAssignment& a = deployment.assignments[c];
    ClientLedger& cl = result.ledger.clients[c];
    cl.client_id = a.client_id;
    cl.share_group = a.share_group;
    cl.masked = a.masked;
    const AttackModule& m = deployment.module_for(a);
    cl.images.reserve(batches[c].size());
    for (std::size_t i = 0; i < batches[c].size(); ++i) {
      LedgerImage li;
      li.label = batches[c].labels[i];
      li.brightness = summed_channel_mean(batches[c].images[i]);
      li.bin = a.masked ? -1 : bin_index_for(li.brightness, m.bin_cutoffs);
      li.image = std::move(batches[c].images[i]);
      cl.images.push_back(std::move(li));
    }
  }
  return result;
}

}  // namespace fedleak
