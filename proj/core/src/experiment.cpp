#include "fedleak/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedleak/binlearn.hpp"
#include "fedleak/nn.hpp"
#include "fedleak/prng.hpp"

namespace fedleak {

namespace {

using nlohmann::json;

constexpr std::uint64_t kDataTag = 0xda7a;
constexpr std::uint64_t kLabelTag = 0x1abe1;
constexpr std::uint64_t kProfileTag = 0xc11e;
constexpr std::uint64_t kPoolTag = 0x9001;

// Class-ink mixture standing in for MNIST's per-image brightness shape:
// per-class mean ink fractions with tight within-class spread. The matched
// Gaussian bin fit is deliberately imperfect against this multi-modal shape.
const std::vector<double> kMnistLikeMeans = {0.175, 0.076, 0.149, 0.141, 0.121,
                                             0.128, 0.140, 0.115, 0.151, 0.123};
const std::vector<double> kMnistLikeWeights = {0.0987, 0.1124, 0.0993, 0.1022,
                                               0.0974, 0.0904, 0.0986, 0.1044,
                                               0.0975, 0.0992};
constexpr double kMnistLikeSd = 0.0055;

BrightnessMixture mnist_like_mixture() {
  BrightnessMixture mix;
  mix.weights = kMnistLikeWeights;
  for (double m : kMnistLikeMeans)
    mix.components.push_back({m, kMnistLikeSd});
  return mix;
}

void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  std::size_t n = threads > 0 ? std::size_t(threads)
                              : std::max(1u, std::thread::hardware_concurrency());
  n = std::min(n, count);
  if (n <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < n; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Batch generators

class BatchGenerator {
 public:
  virtual ~BatchGenerator() = default;
  virtual ImageBatch batch(int client, std::size_t round,
                           std::size_t batch_size) const = 0;
  virtual BrightnessProfile auto_moments() const = 0;
};

class SynthGenerator : public BatchGenerator {
 public:
  SynthGenerator(const ExperimentConfig& cfg)
      : cfg_(cfg) {
    if (cfg.dataset == "synth") {
      mixture_ = BrightnessMixture::single(cfg.synth_profile);
    } else if (cfg.dataset == "mnist_like") {
      mixture_ = mnist_like_mixture();
    } else if (cfg.dataset == "synth_mixture") {
      mixture_ = cfg.mixture;
    } else {  // synth_noniid
      per_client_ = true;
      if (!cfg.client_profiles.empty()) {
        client_profiles_ = cfg.client_profiles;
      } else {
        Prng rng(derive_seed(cfg.seed, kProfileTag));
        client_profiles_.resize(cfg.num_clients);
        for (auto& p : client_profiles_) {
          p.mean = rng.next_uniform(cfg.noniid_mean_lo, cfg.noniid_mean_hi);
          p.sd = rng.next_uniform(cfg.noniid_sd_lo, cfg.noniid_sd_hi);
        }
      }
    }
    if (!per_client_) mixture_.validate();
  }

  ImageBatch batch(int client, std::size_t round,
                   std::size_t batch_size) const override {
    ImageBatch b;
    b.client_id = client;
    b.images.reserve(batch_size);
    b.labels.reserve(batch_size);
    const std::uint64_t bseed =
        derive_seed(cfg_.seed, kDataTag, std::uint64_t(client), round);
    Prng pick(derive_seed(bseed, kLabelTag));
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::uint64_t iseed = derive_seed(bseed, 0x1497, i);
      if (per_client_) {
        b.images.push_back(synth_image(client_profiles_[std::size_t(client)],
                                       cfg_.channels, cfg_.height, cfg_.width,
                                       iseed));
        b.labels.push_back(int(pick.next_u64() % cfg_.num_classes));
      } else {
        double wsum = 0.0;
        for (double w : mixture_.weights) wsum += w;
        double u = pick.next_double() * wsum;
        std::size_t k = 0;
        while (k + 1 < mixture_.weights.size() && u >= mixture_.weights[k]) {
          u -= mixture_.weights[k];
          ++k;
        }
        b.images.push_back(synth_image(mixture_.components[k], cfg_.channels,
                                       cfg_.height, cfg_.width, iseed));
        b.labels.push_back(int(k % cfg_.num_classes));
      }
    }
    return b;
  }

  BrightnessProfile auto_moments() const override {
    if (!per_client_) return mixture_.moments();
    // Population moments across the per-client profiles.
    double m = 0.0;
    for (const auto& p : client_profiles_) m += p.mean;
    m /= double(client_profiles_.size());
    double var = 0.0;
    for (const auto& p : client_profiles_) {
      var += p.sd * p.sd + (p.mean - m) * (p.mean - m);
    }
    var /= double(client_profiles_.size());
    return {m, std::sqrt(var)};
  }

 private:
  ExperimentConfig cfg_;
  BrightnessMixture mixture_;
  bool per_client_ = false;
  std::vector<BrightnessProfile> client_profiles_;
};

class PoolGenerator : public BatchGenerator {
 public:
  PoolGenerator(ImagePool pool, std::uint64_t seed)
      : pool_(std::move(pool)), seed_(seed) {
    if (pool_.size() == 0) throw std::runtime_error("dataset pool is empty");
    double m = 0.0;
    std::vector<double> hs(pool_.size());
    for (std::size_t i = 0; i < pool_.size(); ++i) {
      hs[i] = summed_channel_mean(pool_.images[i]);
      m += hs[i];
    }
    m /= double(hs.size());
    double var = 0.0;
    for (double h : hs) var += (h - m) * (h - m);
    moments_ = {m, std::sqrt(var / double(hs.size()))};
  }

  ImageBatch batch(int client, std::size_t round,
                   std::size_t batch_size) const override {
    // Round-global permutation; clients take disjoint contiguous spans and
    // wrap if the pool runs out.
    std::vector<std::uint32_t> perm(pool_.size());
    std::iota(perm.begin(), perm.end(), 0u);
    Prng rng(derive_seed(seed_, kPoolTag, round));
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.next_u64() % i]);
    ImageBatch b;
    b.client_id = client;
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t idx =
          perm[(std::size_t(client) * batch_size + i) % perm.size()];
      b.images.push_back(pool_.images[idx]);
      b.labels.push_back(pool_.labels[idx]);
    }
    return b;
  }

  BrightnessProfile auto_moments() const override { return moments_; }

 private:
  ImagePool pool_;
  std::uint64_t seed_;
  BrightnessProfile moments_;
};

std::unique_ptr<BatchGenerator> make_generator(const ExperimentConfig& cfg) {
  if (cfg.dataset == "mnist")
    return std::make_unique<PoolGenerator>(
        load_mnist(cfg.mnist_images, cfg.mnist_labels), cfg.seed);
  if (cfg.dataset == "cifar10")
    return std::make_unique<PoolGenerator>(
        load_cifar(cfg.cifar_paths, CifarVariant::cifar10), cfg.seed);
  if (cfg.dataset == "cifar100")
    return std::make_unique<PoolGenerator>(
        load_cifar(cfg.cifar_paths, CifarVariant::cifar100), cfg.seed);
  return std::make_unique<SynthGenerator>(cfg);
}

// ---------------------------------------------------------------------------
// Flat parameter layout (matches flatten()'s ordering) for the noise field.

struct FlatLayout {
  std::size_t conv_w = 0, conv_b = 0, fc1_w = 0, fc1_b = 0;
  std::size_t fc2_w = 0, fc2_b = 0, head_w = 0, head_b = 0;
  std::size_t full_cols = 0;
};

FlatLayout layout_for(const AttackModule& m) {
  FlatLayout l;
  const std::size_t hw = m.height * m.width;
  l.full_cols = m.fc1_block.channel_total * hw;
  l.conv_w = 0;
  l.conv_b = l.conv_w + m.conv_w.size();
  l.fc1_w = l.conv_b + m.conv_b.size();
  l.fc1_b = l.fc1_w + m.num_bins() * l.full_cols;
  l.fc2_w = l.fc1_b + m.num_bins();
  l.fc2_b = l.fc2_w + m.fc2_w.size();
  l.head_w = l.fc2_b + m.fc2_b.size();
  l.head_b = l.head_w + m.head_w.size();
  return l;
}

// Client-side defense noise over the client's own update, addressed by the
// full flat parameter index so grouping and execution order cannot change
// the values drawn.
void apply_client_noise(LayerGrads& g, const AttackModule& m,
                        const FlatLayout& l, double sd, std::uint64_t seed,
                        int client) {
  auto add = [&](Tensor& t, std::size_t base) {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] += sd * noise_at(seed, client, base + i);
  };
  if (!g.conv_w.empty()) {
    add(g.conv_w, l.conv_w);
    add(g.conv_b, l.conv_b);
  }
  const std::size_t hw = m.height * m.width;
  const std::size_t begin = g.fc1_block.channel_begin * hw;
  const std::size_t bcols = g.fc1_w.dim(1);
  for (std::size_t r = 0; r < g.fc1_w.dim(0); ++r)
    for (std::size_t c = 0; c < bcols; ++c)
      g.fc1_w[r * bcols + c] +=
          sd * noise_at(seed, client, l.fc1_w + r * l.full_cols + begin + c);
  add(g.fc1_b, l.fc1_b);
  add(g.fc2_w, l.fc2_w);
  add(g.fc2_b, l.fc2_b);
  add(g.head_w, l.head_w);
  add(g.head_b, l.head_b);
}

// Streaming same-block aggregation: plain sum or fixed-point
// encode/modular-sum/decode, one client at a time.
class GroupAccumulator {
 public:
  GroupAccumulator(const AttackModule& m, bool secure,
                   const FixedPointCodec& codec, double gain)
      : secure_(secure), codec_(codec), gain_(gain) {
    template_ = LayerGrads::zeros_like(m);
    if (!secure_) {
      sum_ = template_;
    } else {
      for (const Tensor* t : tensors(template_))
        acc_.emplace_back(t->size(), 0);
    }
  }

  void add(const LayerGrads& g) {
    ++count_;
    if (!secure_) {
      sum_.add(g);
      return;
    }
    std::size_t k = 0;
    for (const Tensor* t : tensors(const_cast<LayerGrads&>(g))) {
      std::vector<double> scaled(t->size());
      for (std::size_t i = 0; i < t->size(); ++i) scaled[i] = (*t)[i] * gain_;
      const std::vector<std::uint64_t> enc = encode(scaled, codec_);
      std::vector<std::uint64_t>& a = acc_[k++];
      for (std::size_t i = 0; i < enc.size(); ++i) a[i] += enc[i];
    }
  }

  LayerGrads finalize() {
    if (!secure_) return std::move(sum_);
    LayerGrads out = template_;
    std::size_t k = 0;
    for (Tensor* t : tensors(out)) {
      const std::vector<double> dec = decode(acc_[k++], codec_, count_);
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = dec[i] / gain_;
    }
    return out;
  }

 private:
  static std::vector<Tensor*> tensors(LayerGrads& g) {
    std::vector<Tensor*> out;
    if (!g.conv_w.empty()) {
      out.push_back(&g.conv_w);
      out.push_back(&g.conv_b);
    }
    out.push_back(&g.fc1_w);
    out.push_back(&g.fc1_b);
    out.push_back(&g.fc2_w);
    out.push_back(&g.fc2_b);
    out.push_back(&g.head_w);
    out.push_back(&g.head_b);
    return out;
  }

  bool secure_;
  FixedPointCodec codec_;
  double gain_;
  LayerGrads template_;
  LayerGrads sum_;
  std::vector<std::vector<std::uint64_t>> acc_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Config parsing

void expect_fields(const json& j, const std::set<std::string>& allowed,
                   const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config." + where +
                                  (where.empty() ? "" : ".") + it.key() +
                                  ": unknown field");
  }
}

BrightnessProfile parse_profile(const json& j, const std::string& where) {
  expect_fields(j, {"mean", "sd"}, where);
  BrightnessProfile p;
  p.mean = j.at("mean").get<double>();
  p.sd = j.at("sd").get<double>();
  return p;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json_text(ss.str());
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") +
                                e.what());
  }
  static const std::set<std::string> allowed = {
      "dataset", "channels", "height", "width", "num_classes",
      "synth_profile", "mixture", "noniid_mean_range", "noniid_sd_range",
      "client_profiles", "mnist_images", "mnist_labels", "cifar_paths",
      "num_clients", "batch_size", "bins_per_client", "kernels",
      "kernel_size", "clients_per_model", "plan", "rounds", "bias_init",
      "bias_mean", "bias_sd", "seed", "aggregation", "noise_sd",
      "overlap_detection", "reconstruction", "scale_max", "ssim_threshold",
      "tau_overlap", "fixed_point_gain", "masked_style", "flat_imprint",
      "output_dir", "save_reconstructions", "threads"};
  expect_fields(j, allowed, "");

  ExperimentConfig c;
  auto get = [&j](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("dataset", c.dataset);
  get("channels", c.channels);
  get("height", c.height);
  get("width", c.width);
  get("num_classes", c.num_classes);
  if (j.contains("synth_profile"))
    c.synth_profile = parse_profile(j.at("synth_profile"), "synth_profile");
  if (j.contains("mixture")) {
    for (const json& comp : j.at("mixture")) {
      expect_fields(comp, {"weight", "mean", "sd"}, "mixture[]");
      c.mixture.weights.push_back(comp.at("weight").get<double>());
      c.mixture.components.push_back(
          {comp.at("mean").get<double>(), comp.at("sd").get<double>()});
    }
  }
  if (j.contains("noniid_mean_range")) {
    const auto v = j.at("noniid_mean_range").get<std::vector<double>>();
    if (v.size() != 2)
      throw std::invalid_argument("config.noniid_mean_range: expected [lo, hi]");
    c.noniid_mean_lo = v[0];
    c.noniid_mean_hi = v[1];
  }
  if (j.contains("noniid_sd_range")) {
    const auto v = j.at("noniid_sd_range").get<std::vector<double>>();
    if (v.size() != 2)
      throw std::invalid_argument("config.noniid_sd_range: expected [lo, hi]");
    c.noniid_sd_lo = v[0];
    c.noniid_sd_hi = v[1];
  }
  if (j.contains("client_profiles")) {
    for (const json& p : j.at("client_profiles"))
      c.client_profiles.push_back(parse_profile(p, "client_profiles[]"));
  }
  get("mnist_images", c.mnist_images);
  get("mnist_labels", c.mnist_labels);
  get("cifar_paths", c.cifar_paths);
  get("num_clients", c.num_clients);
  get("batch_size", c.batch_size);
  get("bins_per_client", c.bins_per_client);
  get("kernels", c.kernels);
  get("kernel_size", c.kernel_size);
  get("clients_per_model", c.clients_per_model);
  if (j.contains("plan")) {
    for (const json& p : j.at("plan")) {
      const auto v = p.get<std::vector<std::size_t>>();
      if (v.size() != 2)
        throw std::invalid_argument("config.plan: entries are [size, count]");
      c.plan.emplace_back(v[0], v[1]);
    }
  }
  get("rounds", c.rounds);
  get("bias_init", c.bias_init);
  if (j.contains("bias_mean")) c.bias_explicit.mean = j.at("bias_mean").get<double>();
  if (j.contains("bias_sd")) c.bias_explicit.sd = j.at("bias_sd").get<double>();
  get("seed", c.seed);
  get("aggregation", c.aggregation);
  get("noise_sd", c.noise_sd);
  get("overlap_detection", c.overlap_detection);
  get("reconstruction", c.reconstruction);
  get("scale_max", c.scale_max);
  get("ssim_threshold", c.ssim_threshold);
  get("tau_overlap", c.tau_overlap);
  get("fixed_point_gain", c.fixed_point_gain);
  get("masked_style", c.masked_style);
  get("flat_imprint", c.flat_imprint);
  get("output_dir", c.output_dir);
  get("save_reconstructions", c.save_reconstructions);
  get("threads", c.threads);
  c.validate();
  return c;
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["dataset"] = dataset;
  j["channels"] = channels;
  j["height"] = height;
  j["width"] = width;
  j["num_classes"] = num_classes;
  j["synth_profile"] = {{"mean", synth_profile.mean}, {"sd", synth_profile.sd}};
  if (!mixture.components.empty()) {
    json mix = json::array();
    for (std::size_t i = 0; i < mixture.components.size(); ++i)
      mix.push_back({{"weight", mixture.weights[i]},
                     {"mean", mixture.components[i].mean},
                     {"sd", mixture.components[i].sd}});
    j["mixture"] = mix;
  }
  j["noniid_mean_range"] = {noniid_mean_lo, noniid_mean_hi};
  j["noniid_sd_range"] = {noniid_sd_lo, noniid_sd_hi};
  j["num_clients"] = num_clients;
  j["batch_size"] = batch_size;
  j["bins_per_client"] = bins_per_client;
  j["kernels"] = kernels;
  j["kernel_size"] = kernel_size;
  j["clients_per_model"] = clients_per_model;
  if (!plan.empty()) {
    json p = json::array();
    for (const auto& [s, n] : plan) p.push_back({s, n});
    j["plan"] = p;
  }
  j["rounds"] = rounds;
  j["bias_init"] = bias_init;
  j["bias_mean"] = bias_explicit.mean;
  j["bias_sd"] = bias_explicit.sd;
  j["seed"] = seed;
  j["aggregation"] = aggregation;
  j["noise_sd"] = noise_sd;
  j["overlap_detection"] = overlap_detection;
  j["reconstruction"] = reconstruction;
  j["scale_max"] = scale_max;
  j["ssim_threshold"] = ssim_threshold;
  j["tau_overlap"] = tau_overlap;
  j["fixed_point_gain"] = fixed_point_gain;
  j["masked_style"] = masked_style;
  j["flat_imprint"] = flat_imprint;
  j["output_dir"] = output_dir;
  j["save_reconstructions"] = save_reconstructions;
  j["threads"] = threads;
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("config." + field + ": " + why);
  };
  static const std::set<std::string> datasets = {
      "synth", "synth_mixture", "synth_noniid", "mnist_like",
      "mnist",  "cifar10",       "cifar100"};
  if (!datasets.count(dataset)) fail("dataset", "unknown dataset '" + dataset + "'");
  if (num_clients < 1) fail("num_clients", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (rounds < 1) fail("rounds", "must be >= 1");
  if (channels < 1 || (channels != 1 && channels != 3))
    fail("channels", "must be 1 or 3");
  if (height < 1 || width < 1) fail("height", "dimensions must be >= 1");
  if (kernel_size % 2 == 0) fail("kernel_size", "must be odd");
  if (clients_per_model < 1) fail("clients_per_model", "must be >= 1");
  if (aggregation != "plain" && aggregation != "secure")
    fail("aggregation", "must be 'plain' or 'secure'");
  if (noise_sd < 0.0) fail("noise_sd", "must be >= 0");
  if (overlap_detection != "oracle" && overlap_detection != "heuristic")
    fail("overlap_detection", "must be 'oracle' or 'heuristic'");
  if (reconstruction != "biasfree" && reconstruction != "withbias")
    fail("reconstruction", "must be 'biasfree' or 'withbias'");
  if (reconstruction == "withbias" &&
      (num_clients != 1 || aggregation != "plain"))
    fail("reconstruction",
         "withbias needs uncoupled bias gradients: a single client under "
         "plain aggregation");
  if (scale_max <= 0.0) fail("scale_max", "must be > 0");
  if (bias_init != "auto" && bias_init != "agnostic" && bias_init != "explicit")
    fail("bias_init", "must be 'auto', 'agnostic' or 'explicit'");
  if (bias_init == "explicit" && !(bias_explicit.sd > 0.0))
    fail("bias_sd", "must be > 0 for explicit bias init");
  if (dataset == "mnist" && (mnist_images.empty() || mnist_labels.empty()))
    fail("mnist_images", "mnist dataset needs mnist_images and mnist_labels");
  if ((dataset == "cifar10" || dataset == "cifar100") && cifar_paths.empty())
    fail("cifar_paths", "cifar datasets need at least one binary path");
  if (dataset == "synth_mixture" && mixture.components.empty())
    fail("mixture", "synth_mixture needs mixture components");
  static const std::set<std::string> styles = {
      "zero_kernels", "negative_conv_bias", "fc_bias_block", "decoy_kernel"};
  if (!styles.count(masked_style)) fail("masked_style", "unknown style");
  if (fixed_point_gain <= 0.0) fail("fixed_point_gain", "must be > 0");
}

namespace {

MaskStyle parse_mask_style(const std::string& s) {
  if (s == "zero_kernels") return MaskStyle::zero_kernels;
  if (s == "negative_conv_bias") return MaskStyle::negative_conv_bias;
  if (s == "fc_bias_block") return MaskStyle::fc_bias_block;
  return MaskStyle::decoy_kernel;
}

struct GroupSpec {
  int group = -1;
  std::vector<int> clients;
};

struct EngineSetup {
  std::vector<ClientAssignment> assignments;
  std::vector<GroupSpec> groups;
  std::size_t kernels = 0;
  std::size_t masked_clients = 0;
};

EngineSetup plan_engine(const ExperimentConfig& cfg) {
  EngineSetup s;
  if (cfg.flat_imprint) {
    // One shared module, every client in group 0.
    GroupSpec g;
    g.group = 0;
    for (std::size_t c = 0; c < cfg.num_clients; ++c) {
      s.assignments.push_back({int(c), 0, 0, false});
      g.clients.push_back(int(c));
    }
    s.groups.push_back(std::move(g));
    return s;
  }
  std::size_t groups_wanted =
      cfg.plan.empty()
          ? (cfg.num_clients + cfg.clients_per_model - 1) / cfg.clients_per_model
          : [&] {
              std::size_t n = 0;
              for (const auto& [size, count] : cfg.plan) n += count;
              return n;
            }();
  std::size_t kernels = cfg.kernels;
  if (kernels == 0) kernels = std::max<std::size_t>(1, cfg.channels * groups_wanted);
  const std::size_t sets = max_identity_sets(kernels, cfg.channels);
  s.kernels = kernels;
  s.assignments = cfg.plan.empty()
                      ? plan_assignments(cfg.num_clients, sets,
                                         cfg.clients_per_model)
                      : plan_assignments(cfg.num_clients, sets, cfg.plan);
  std::map<int, GroupSpec> by_group;
  for (const ClientAssignment& a : s.assignments) {
    if (a.masked) {
      ++s.masked_clients;
      continue;
    }
    GroupSpec& g = by_group[a.share_group];
    g.group = a.share_group;
    g.clients.push_back(a.client_id);
  }
  for (auto& [gid, g] : by_group) s.groups.push_back(std::move(g));
  return s;
}

BrightnessProfile resolve_bias_init(const ExperimentConfig& cfg,
                                    const BatchGenerator& gen) {
  if (cfg.bias_init == "agnostic") return agnostic_init(cfg.channels);
  if (cfg.bias_init == "explicit") return cfg.bias_explicit;
  BrightnessProfile p = gen.auto_moments();
  if (!(p.sd > 0.0)) p.sd = 0.05;  // degenerate data still needs spread bins
  return p;
}

AttackModuleConfig module_config(const ExperimentConfig& cfg,
                                 std::size_t kernels, int identity_set,
                                 const BrightnessProfile& profile) {
  AttackModuleConfig mc;
  mc.in_channels = cfg.channels;
  mc.height = cfg.height;
  mc.width = cfg.width;
  mc.kernels = kernels;
  mc.kernel_size = cfg.kernel_size;
  mc.num_bins = cfg.effective_bins();
  mc.identity_set = identity_set;
  mc.bias_mean = profile.mean;
  mc.bias_sd = profile.sd;
  mc.seed = cfg.seed;
  mc.num_classes = cfg.num_classes;
  return mc;
}

struct GroupRoundResult {
  GroupReport report;
  LeakageSummary partial;  // running sums; finalized at merge time
  std::vector<int> occupancy;
  std::vector<double> ssims, psnrs;
  std::vector<bool> leaked;
  BrightnessProfile next_profile;
};

struct ReconRecord {
  std::uint32_t round, group, bin, channels, height, width;
  double scale;
  std::vector<double> pixels;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::unique_ptr<BatchGenerator> gen = make_generator(cfg);
  const EngineSetup setup = plan_engine(cfg);
  const bool secure = cfg.aggregation == "secure";
  const FixedPointCodec codec;
  const std::size_t bins = cfg.effective_bins();

  BrightnessProfile init = resolve_bias_init(cfg, *gen);
  std::vector<BrightnessProfile> profiles(setup.groups.size(), init);

  ExperimentResult result;
  result.output_dir = cfg.output_dir;

  const bool writing = !cfg.output_dir.empty();
  std::ofstream summary_csv, report_csv, profiles_csv, recon_bin;
  if (writing) {
    std::filesystem::create_directories(cfg.output_dir);
    summary_csv.open(cfg.output_dir + "/summary.csv");
    summary_csv << "round,leaked,attacked_images,total_images,"
                   "leakage_rate_attacked,leakage_rate_total,"
                   "mean_ssim_correct,mean_psnr_correct,mean_ssim_overlap,"
                   "mean_psnr_overlap,mean_ssim_total,mean_psnr_total,"
                   "eps_empty,min_occupied_diff,max_empty_diff\n";
    report_csv.open(cfg.output_dir + "/report.csv");
    report_csv << "round,group,clients,identity_set,bin,cutoff,outcome,"
                  "occupancy,ssim,psnr,leaked\n";
    profiles_csv.open(cfg.output_dir + "/profiles.csv");
    profiles_csv << "round,group,mean,sd\n";
    if (cfg.save_reconstructions) {
      recon_bin.open(cfg.output_dir + "/reconstructions.bin",
                     std::ios::binary);
      recon_bin.write("FLRC", 4);
      const std::uint32_t version = 1;
      recon_bin.write(reinterpret_cast<const char*>(&version), 4);
    }
  }

  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    result.deployed_profiles.push_back(profiles);

    AttackModule masked_module;
    if (setup.masked_clients > 0) {
      AttackModuleConfig mc = module_config(cfg, setup.kernels, 0, init);
      masked_module =
          build_masked_module(mc, parse_mask_style(cfg.masked_style));
    }

    std::vector<GroupRoundResult> group_results(setup.groups.size());
    const double sd = cfg.noise_sd;
    const std::uint64_t round_seed = derive_seed(cfg.seed, 0x2011d, round);

    parallel_for(setup.groups.size(), cfg.threads, [&](std::size_t gi) {
      const GroupSpec& spec = setup.groups[gi];
      GroupRoundResult& out = group_results[gi];

      AttackModule module;
      if (cfg.flat_imprint) {
        AttackModuleConfig mc = module_config(cfg, 0, 0, profiles[gi]);
        module = build_flat_imprint_module(mc);
      } else {
        AttackModuleConfig mc =
            module_config(cfg, setup.kernels, spec.group, profiles[gi]);
        module = build_attack_module(mc);
      }
      const FlatLayout layout = layout_for(module);

      GroupAccumulator acc(module, secure, codec, cfg.fixed_point_gain);
      std::vector<ClientLedger> ledgers;
      ledgers.reserve(spec.clients.size());
      for (int client : spec.clients) {
        ImageBatch batch = gen->batch(client, round, cfg.batch_size);
        GradientUpdate u = client_step(module, batch);
        if (sd > 0.0)
          apply_client_noise(u.grads, module, layout, sd, round_seed, client);
        acc.add(u.grads);
        ClientLedger cl;
        cl.client_id = client;
        cl.share_group = spec.group;
        cl.masked = false;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          LedgerImage li;
          li.label = batch.labels[i];
          li.brightness = summed_channel_mean(batch.images[i]);
          li.bin = -1;
          for (std::size_t j = 0;
               j < module.bin_cutoffs.size() &&
               module.bin_cutoffs[j] < li.brightness;
               ++j)
            li.bin = int(j);
          li.image = std::move(batch.images[i]);
          cl.images.push_back(std::move(li));
        }
        ledgers.push_back(std::move(cl));
      }

      LayerGrads slice = acc.finalize();
      if (sd > 0.0) {
        // Noise from every client outside this group also lands in the
        // group's FC1 block.
        const std::size_t hw = cfg.height * cfg.width;
        const std::size_t begin = module.fc1_block.channel_begin * hw;
        const std::size_t bcols = slice.fc1_w.dim(1);
        std::set<int> members(spec.clients.begin(), spec.clients.end());
        for (std::size_t c = 0; c < cfg.num_clients; ++c) {
          if (members.count(int(c))) continue;
          for (std::size_t r = 0; r < slice.fc1_w.dim(0); ++r)
            for (std::size_t col = 0; col < bcols; ++col)
              slice.fc1_w[r * bcols + col] +=
                  sd * noise_at(round_seed, int(c),
                                layout.fc1_w + r * layout.full_cols + begin +
                                    col);
        }
      }

      ReconstructOptions opt;
      opt.scale_max = cfg.scale_max;
      opt.eps_empty = eps_empty_for_noise(sd, cfg.num_clients);
      opt.overlap = cfg.overlap_detection == "oracle" ? OverlapMode::oracle
                                                      : OverlapMode::heuristic;
      opt.tau_overlap = cfg.tau_overlap;

      std::vector<int> occupancy(bins, 0);
      for (const ClientLedger& cl : ledgers)
        for (const LedgerImage& im : cl.images)
          if (im.bin >= 0) occupancy[std::size_t(im.bin)] += 1;
      const std::vector<int>* oracle =
          opt.overlap == OverlapMode::oracle ? &occupancy : nullptr;

      if (cfg.reconstruction == "withbias") {
        out.report.share_group = spec.group;
        out.report.identity_set = cfg.flat_imprint ? -1 : spec.group;
        out.report.clients = spec.clients;
        out.report.bins = reconstruct_withbias(
            slice.fc1_w, slice.fc1_b, module.bin_cutoffs, cfg.channels,
            cfg.height, cfg.width, /*coupled=*/cfg.num_clients > 1);
        finish_group_report(out.report, module.bin_cutoffs, opt, oracle);
      } else {
        out.report = reconstruct_group(
            spec.group, cfg.flat_imprint ? -1 : spec.group, spec.clients,
            slice.fc1_w, module.bin_cutoffs, cfg.channels, cfg.height,
            cfg.width, opt, oracle);
      }

      std::vector<const ClientLedger*> members;
      for (const ClientLedger& cl : ledgers) members.push_back(&cl);
      leakage_account_group(out.report, members, cfg.ssim_threshold,
                            out.partial, &out.ssims, &out.psnrs,
                            &out.occupancy, &out.leaked);
      out.next_profile = update_profile(out.report.observations, profiles[gi]);
      if (!cfg.save_reconstructions) {
        for (BinOutcome& o : out.report.bins) o.image = Tensor();
      }
    });

    // Deterministic merge in group order.
    RoundSummary rs;
    rs.round = round;
    rs.eps_empty = eps_empty_for_noise(sd, cfg.num_clients);
    rs.min_occupied_diff = std::numeric_limits<double>::infinity();
    rs.max_empty_diff = 0.0;
    rs.leakage.total_images = cfg.num_clients * cfg.batch_size;
    for (std::size_t gi = 0; gi < setup.groups.size(); ++gi) {
      GroupRoundResult& gr = group_results[gi];
      rs.leakage.leaked_count += gr.partial.leaked_count;
      rs.leakage.attacked_images += gr.partial.attacked_images;
      rs.leakage.correct_bins += gr.partial.correct_bins;
      rs.leakage.overlap_bins += gr.partial.overlap_bins;
      rs.leakage.mean_ssim_correct += gr.partial.mean_ssim_correct;
      rs.leakage.mean_psnr_correct += gr.partial.mean_psnr_correct;
      rs.leakage.mean_ssim_overlap += gr.partial.mean_ssim_overlap;
      rs.leakage.mean_psnr_overlap += gr.partial.mean_psnr_overlap;
      rs.leakage.mean_ssim_total += gr.partial.mean_ssim_total;
      rs.leakage.mean_psnr_total += gr.partial.mean_psnr_total;
      rs.min_occupied_diff =
          std::min(rs.min_occupied_diff, gr.report.min_occupied_diff);
      rs.max_empty_diff = std::max(rs.max_empty_diff, gr.report.max_empty_diff);

      if (writing) {
        std::string clients_str;
        for (std::size_t i = 0; i < gr.report.clients.size(); ++i) {
          if (i) clients_str += "|";
          clients_str += std::to_string(gr.report.clients[i]);
        }
        for (std::size_t b = 0; b < gr.report.bins.size(); ++b) {
          const BinOutcome& o = gr.report.bins[b];
          const char* outcome =
              o.kind == BinOutcomeKind::empty
                  ? "empty"
                  : (o.kind == BinOutcomeKind::image ? "image" : "overlap");
          report_csv << round << "," << gr.report.share_group << ","
                     << clients_str << "," << gr.report.identity_set << ","
                     << b << "," << fmt(o.cutoff) << "," << outcome << ","
                     << gr.occupancy[b] << "," << fmt(gr.ssims[b]) << ","
                     << fmt(gr.psnrs[b]) << "," << (gr.leaked[b] ? 1 : 0)
                     << "\n";
        }
        profiles_csv << round << "," << gr.report.share_group << ","
                     << fmt(profiles[gi].mean) << "," << fmt(profiles[gi].sd)
                     << "\n";
        if (cfg.save_reconstructions && recon_bin) {
          for (const BinOutcome& o : gr.report.bins) {
            if (o.kind == BinOutcomeKind::empty) continue;
            const std::uint32_t head[6] = {
                std::uint32_t(round), std::uint32_t(gr.report.share_group),
                std::uint32_t(o.bin), std::uint32_t(cfg.channels),
                std::uint32_t(cfg.height), std::uint32_t(cfg.width)};
            recon_bin.write(reinterpret_cast<const char*>(head), sizeof(head));
            recon_bin.write(reinterpret_cast<const char*>(&o.scale_max_used),
                            8);
            recon_bin.write(reinterpret_cast<const char*>(o.image.data()),
                            std::streamsize(o.image.size() * 8));
          }
        }
      }
      profiles[gi] = gr.next_profile;
    }
    rs.leakage.finalize();
    if (rs.min_occupied_diff == std::numeric_limits<double>::infinity())
      rs.min_occupied_diff = 0.0;
    if (writing) {
      summary_csv << round << "," << rs.leakage.leaked_count << ","
                  << rs.leakage.attacked_images << ","
                  << rs.leakage.total_images << ","
                  << fmt(rs.leakage.leakage_rate_attacked) << ","
                  << fmt(rs.leakage.leakage_rate_total) << ","
                  << fmt(rs.leakage.mean_ssim_correct) << ","
                  << fmt(rs.leakage.mean_psnr_correct) << ","
                  << fmt(rs.leakage.mean_ssim_overlap) << ","
                  << fmt(rs.leakage.mean_psnr_overlap) << ","
                  << fmt(rs.leakage.mean_ssim_total) << ","
                  << fmt(rs.leakage.mean_psnr_total) << ","
                  << fmt(rs.eps_empty) << "," << fmt(rs.min_occupied_diff)
                  << "," << fmt(rs.max_empty_diff) << "\n";
    }
    result.rounds.push_back(std::move(rs));
  }

  if (writing) {
    json jr;
    jr["config"] = json::parse(cfg.to_json_text());
    json rounds = json::array();
    for (const RoundSummary& rs : result.rounds) {
      rounds.push_back({{"round", rs.round},
                        {"leaked", rs.leakage.leaked_count},
                        {"attacked_images", rs.leakage.attacked_images},
                        {"total_images", rs.leakage.total_images},
                        {"leakage_rate_attacked", rs.leakage.leakage_rate_attacked},
                        {"leakage_rate_total", rs.leakage.leakage_rate_total},
                        {"eps_empty", rs.eps_empty},
                        {"min_occupied_diff", rs.min_occupied_diff},
                        {"max_empty_diff", rs.max_empty_diff}});
    }
    jr["rounds"] = rounds;
    jr["files"] = {"summary.csv", "report.csv", "profiles.csv"};
    if (cfg.save_reconstructions) jr["files"].push_back("reconstructions.bin");
    std::ofstream(cfg.output_dir + "/results.json") << jr.dump(2) << "\n";
  }
  return result;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "clients") return SweepAxis::clients;
  if (name == "batch") return SweepAxis::batch;
  if (name == "clients_per_model") return SweepAxis::clients_per_model;
  if (name == "fc_size") return SweepAxis::fc_size;
  throw std::invalid_argument("unknown sweep axis '" + name +
                              "' (clients|batch|clients_per_model|fc_size)");
}

namespace {

ExperimentConfig config_for_value(const ExperimentConfig& base, SweepAxis axis,
                                  std::size_t value) {
  ExperimentConfig c = base;
  c.output_dir.clear();
  c.save_reconstructions = false;
  switch (axis) {
    case SweepAxis::clients:
      c.num_clients = value;
      c.kernels = 0;  // auto-scale the conv layer with the client count
      break;
    case SweepAxis::batch:
      c.batch_size = value;
      break;
    case SweepAxis::clients_per_model:
      c.clients_per_model = value;
      break;
    case SweepAxis::fc_size:
      c.bins_per_client = value;
      break;
  }
  return c;
}

double rate_for(const ExperimentConfig& cfg) {
  const ExperimentResult r = run_experiment(cfg);
  return r.rounds.back().leakage.leakage_rate_total;
}

}  // namespace

std::vector<SweepPoint> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                  const std::vector<std::size_t>& values,
                                  const SweepOptions& options) {
  std::vector<std::uint64_t> seeds =
      options.seeds.empty() ? std::vector<std::uint64_t>{base.seed}
                            : options.seeds;
  std::vector<SweepPoint> points;
  const std::size_t bins_per_image =
      base.effective_bins() / std::max<std::size_t>(1, base.batch_size);

  for (std::size_t value : values) {
    SweepPoint p;
    p.value = value;
    double acc_rate = 0.0, acc_total = 0.0;
    std::size_t acc_leaked = 0;
    for (std::uint64_t s : seeds) {
      ExperimentConfig c = config_for_value(base, axis, value);
      c.seed = s;
      const ExperimentResult r = run_experiment(c);
      acc_rate += r.rounds.back().leakage.leakage_rate_attacked;
      acc_total += r.rounds.back().leakage.leakage_rate_total;
      acc_leaked += r.rounds.back().leakage.leaked_count;
    }
    p.mandrake_rate = acc_rate / double(seeds.size());
    p.mandrake_rate_total = acc_total / double(seeds.size());
    p.mandrake_leaked = acc_leaked / seeds.size();

    if (options.baselines &&
        (axis == SweepAxis::clients || axis == SweepAxis::batch)) {
      const ExperimentConfig c = config_for_value(base, axis, value);
      const std::size_t total_images = c.num_clients * c.batch_size;
      auto flat_rate = [&](std::size_t total_bins) -> double {
        if (total_bins == 0 || total_bins > options.baseline_max_bins)
          return -1.0;
        double acc = 0.0;
        for (std::uint64_t s : seeds) {
          ExperimentConfig f = c;
          f.flat_imprint = true;
          f.bins_per_client = total_bins;
          f.aggregation = "plain";  // quantization does not change occupancy
          f.seed = s;
          acc += rate_for(f);
        }
        return acc / double(seeds.size());
      };
      p.flat_same_bins = flat_rate(bins_per_image * total_images);
      p.flat_same_total = flat_rate((bins_per_image / 2) * total_images);
      p.flat_same_nonzero = flat_rate(base.effective_bins());
    }
    points.push_back(p);
  }

  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream csv(base.output_dir + "/sweep.csv");
    csv << "axis_value,mandrake_rate_attacked,mandrake_rate_total,"
           "mandrake_leaked,flat_same_bins,flat_same_total,flat_same_nonzero\n";
    for (const SweepPoint& p : points) {
      csv << p.value << "," << fmt(p.mandrake_rate) << ","
          << fmt(p.mandrake_rate_total) << "," << p.mandrake_leaked << ","
          << fmt(p.flat_same_bins) << "," << fmt(p.flat_same_total) << ","
          << fmt(p.flat_same_nonzero) << "\n";
    }
  }
  return points;
}

int dump_images(const std::string& results_dir) {
  const std::string bin_path = results_dir + "/reconstructions.bin";
  std::ifstream f(bin_path, std::ios::binary);
  if (!f)
    throw std::runtime_error(
        "no reconstructions.bin under " + results_dir +
        " (run with save_reconstructions=true first)");
  char magic[4];
  std::uint32_t version = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || std::string(magic, 4) != "FLRC" || version != 1)
    throw std::runtime_error(bin_path + ": unrecognized header");

  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<ReconRecord>>
      by_round_group;
  for (;;) {
    std::uint32_t head[6];
    if (!f.read(reinterpret_cast<char*>(head), sizeof(head))) break;
    ReconRecord r;
    r.round = head[0];
    r.group = head[1];
    r.bin = head[2];
    r.channels = head[3];
    r.height = head[4];
    r.width = head[5];
    f.read(reinterpret_cast<char*>(&r.scale), 8);
    r.pixels.resize(std::size_t(r.channels) * r.height * r.width);
    f.read(reinterpret_cast<char*>(r.pixels.data()),
           std::streamsize(r.pixels.size() * 8));
    if (!f) throw std::runtime_error(bin_path + ": truncated record");
    by_round_group[{r.round, r.group}].push_back(std::move(r));
  }

  const std::string grid_dir = results_dir + "/grids";
  std::filesystem::create_directories(grid_dir);
  int written = 0;
  for (const auto& [key, records] : by_round_group) {
    const ReconRecord& first = records.front();
    std::vector<Tensor> tiles;
    for (const ReconRecord& r : records) {
      Tensor t({r.channels, r.height, r.width});
      // Display normalization: scale so the brightest pixel is 1.
      double m = 0.0;
      for (double v : r.pixels) m = std::max(m, v);
      const double inv = m > 0 ? 1.0 / m : 1.0;
      for (std::size_t i = 0; i < r.pixels.size(); ++i)
        t[i] = r.pixels[i] * inv;
      tiles.push_back(std::move(t));
    }
    const std::size_t cols = std::max<std::size_t>(
        1, std::size_t(std::ceil(std::sqrt(double(tiles.size())))));
    char name[64];
    std::snprintf(name, sizeof(name), "/round%u_group%u.%s", key.first,
                  key.second, first.channels == 1 ? "pgm" : "ppm");
    write_image_grid(tiles, cols, first.channels, first.height, first.width,
                     grid_dir + name);
    ++written;
  }
  return written;
}

}  // namespace fedleak
