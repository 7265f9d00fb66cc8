#include <map>
#include <set>

#include <doctest.h>

#include "fedleak/attack.hpp"
#include "fedleak/data.hpp"
#include "fedleak/nn.hpp"
#include "support/test_support.hpp"

using namespace fedleak;

namespace {

AttackModuleConfig small_cfg() {
  AttackModuleConfig cfg;
  cfg.in_channels = 3;
  cfg.height = cfg.width = 8;
  cfg.kernels = 12;
  cfg.num_bins = 16;
  cfg.identity_set = 0;
  cfg.bias_mean = 1.5;
  cfg.bias_sd = 0.5;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("identity set budget") {
  CHECK(max_identity_sets(256, 3) == 85);
  CHECK(max_identity_sets(256, 1) == 256);
  CHECK_THROWS_AS(build_identity_set(0, 3, 4), std::invalid_argument);

  AttackModuleConfig cfg = small_cfg();
  cfg.identity_set = 4;  // 12 kernels / 3 channels -> sets 0..3
  CHECK_THROWS_WITH_AS(build_attack_module(cfg), doctest::Contains("budget"),
                       std::invalid_argument);
}

TEST_CASE("identity sets of distinct indices touch disjoint kernels and "
          "their pushforward is exact") {
  AttackModuleConfig cfg = small_cfg();
  std::set<std::size_t> used;
  for (int s = 0; s < 4; ++s) {
    cfg.identity_set = s;
    const AttackModule m = build_attack_module(cfg);
    // Collect kernels with any non-zero weight.
    const std::size_t ksz = m.conv_w.size() / m.conv_w.dim(0);
    for (std::size_t k = 0; k < m.conv_w.dim(0); ++k) {
      bool nonzero = false;
      for (std::size_t i = 0; i < ksz; ++i)
        if (m.conv_w[k * ksz + i] != 0.0) nonzero = true;
      if (nonzero) CHECK(used.insert(k).second);
    }
    // Pushforward: the image appears exactly on the set's channels.
    const Tensor image = testsup::make_random_image(40 + s, 3, 8, 8, 0.0, 1.0);
    const Tensor out = conv2d_forward(image, m.conv_w, m.conv_b, 1, 1);
    const std::size_t hw = 64;
    for (std::size_t k = 0; k < m.conv_w.dim(0); ++k) {
      const bool in_set = k >= std::size_t(s) * 3 && k < std::size_t(s + 1) * 3;
      for (std::size_t i = 0; i < hw; ++i) {
        if (in_set)
          CHECK(out[k * hw + i] == image[(k - std::size_t(s) * 3) * hw + i]);
        else
          CHECK(out[k * hw + i] == 0.0);
      }
    }
  }
  CHECK(used.size() == 12);
}

TEST_CASE("attack module measurement and bins") {
  const AttackModule m = build_attack_module(small_cfg());
  SUBCASE("invariants: negative biases, ascending cutoffs, identical rows") {
    for (std::size_t j = 0; j < m.num_bins(); ++j) {
      CHECK(m.fc1_b[j] == -m.bin_cutoffs[j]);
      CHECK(m.fc1_b[j] < 0.0);
      if (j) CHECK(m.bin_cutoffs[j] > m.bin_cutoffs[j - 1]);
    }
    for (std::size_t i = 0; i < m.fc2_w.size(); ++i)
      CHECK(m.fc2_w[i] == 0.01);
  }
  SUBCASE("measurement of the pushed-through image is the summed-channel "
          "mean, in [0, 3]") {
    const Tensor image = testsup::make_random_image(50, 3, 8, 8, 0.0, 1.0);
    const ModuleForward f = module_forward(m, image, 0);
    const double h = summed_channel_mean(image);
    CHECK(h >= 0.0);
    CHECK(h <= 3.0);
    for (std::size_t j = 0; j < m.num_bins(); ++j)
      CHECK(f.a[j] == doctest::Approx(h - m.bin_cutoffs[j]).epsilon(1e-12));
  }
  SUBCASE("num_bins=1 places the single cutoff at the mean") {
    AttackModuleConfig cfg = small_cfg();
    cfg.num_bins = 1;
    cfg.bias_mean = 0.73;
    const AttackModule one = build_attack_module(cfg);
    CHECK(one.bin_cutoffs[0] == doctest::Approx(0.73).epsilon(1e-12));
  }
  SUBCASE("default 3-channel profile centers bins at 1.5 sd 0.5") {
    // Half the cutoffs below the mean, half above; median pair brackets it.
    std::size_t below = 0;
    for (double c : m.bin_cutoffs) below += (c < 1.5);
    CHECK(below == m.num_bins() / 2);
  }
}

TEST_CASE("gaussian cutoffs clamp non-positive quantiles onto a tiny ladder") {
  const auto cutoffs = gaussian_bin_cutoffs(32, 0.05, 0.25);
  for (std::size_t j = 0; j < cutoffs.size(); ++j) {
    CHECK(cutoffs[j] > 0.0);
    if (j) CHECK(cutoffs[j] > cutoffs[j - 1]);
  }
}

TEST_CASE("masked modules produce exactly zero FC1 gradients for any batch") {
  AttackModuleConfig cfg = small_cfg();
  for (MaskStyle style :
       {MaskStyle::zero_kernels, MaskStyle::negative_conv_bias,
        MaskStyle::fc_bias_block, MaskStyle::decoy_kernel}) {
    CAPTURE(int(style));
    const AttackModule m = build_masked_module(cfg, style);
    for (int trial = 0; trial < 8; ++trial) {
      const Tensor image =
          testsup::make_random_image(700 + trial, 3, 8, 8, 0.0, 1.0);
      const LayerGrads g = module_backward(m, image, trial % 3);
      CHECK(g.fc1_w.max_abs() == 0.0);
      CHECK(g.fc1_b.max_abs() == 0.0);
    }
  }
}

TEST_CASE("fc_bias_block blocks even the maximum possible measurement") {
  AttackModuleConfig cfg = small_cfg();
  const AttackModule m = build_masked_module(cfg, MaskStyle::fc_bias_block);
  Tensor ones({3, 8, 8});
  ones.fill(1.0);  // measurement = C_in, the maximum
  const ModuleForward f = module_forward(m, ones, 0);
  for (std::size_t j = 0; j < f.a.size(); ++j) CHECK(f.a[j] < 0.0);
  const LayerGrads g = module_backward(m, ones, 0);
  CHECK(g.fc1_w.max_abs() == 0.0);
}

TEST_CASE("decoy kernel: module output is non-zero yet FC1 gradients are 0") {
  AttackModuleConfig cfg = small_cfg();
  const AttackModule m = build_masked_module(cfg, MaskStyle::decoy_kernel);
  const Tensor image = testsup::make_random_image(90, 3, 8, 8, 0.0, 1.0);
  const ModuleForward f = module_forward(m, image, 0);
  CHECK(f.z.max_abs() > 0.0);
  const LayerGrads g = module_backward(m, image, 0);
  CHECK(g.fc1_w.max_abs() == 0.0);
  // The decoy conv channel itself is live.
  const Tensor conv = conv2d_forward(image, m.conv_w, m.conv_b, 1, 1);
  const std::size_t hw = 64;
  double live = 0.0;
  for (std::size_t i = 0; i < hw; ++i)
    live = std::max(live, std::fabs(conv[(m.conv_w.dim(0) - 1) * hw + i]));
  CHECK(live > 0.0);
}

TEST_CASE("flat imprint module") {
  AttackModuleConfig cfg = small_cfg();
  cfg.num_bins = 24;
  const AttackModule m = build_flat_imprint_module(cfg);
  CHECK(m.conv_kind == ConvKind::none);
  CHECK(m.fc1_w.dim(1) == 3 * 8 * 8);
  const Tensor image = testsup::make_random_image(91, 3, 8, 8, 0.0, 1.0);
  const ModuleForward f = module_forward(m, image, 0);
  const double h = summed_channel_mean(image);
  for (std::size_t j = 0; j < m.num_bins(); ++j)
    CHECK(f.a[j] == doctest::Approx(h - m.bin_cutoffs[j]).epsilon(1e-12));
}

TEST_CASE("parameter accounting reproduces the reference figures") {
  // 100 clients, batch 64, 4 bins per image, 32x32x3.
  const ParamCount sep = param_count_separated(100, 3, 32, 32, 256, 3);
  CHECK(sep.first_layer_weights == 78643200);
  CHECK(sep.fc2_weights == 786432);
  CHECK(sep.conv_weights_single_slice == 2700);
  CHECK(sep.conv_weights_full == 8100);
  CHECK(sep.nonzero_fraction <= 0.025);
  CHECK(sep.nonzero_fraction > 0.015);

  const ParamCount flat = param_count_flat(25600, 3, 32, 32);
  CHECK(flat.first_layer_weights == 78643200);
  CHECK(flat.fc2_weights == 78643200);

  // Same-nonzero-parameter comparison setting: 256 bins in total.
  const ParamCount flat_nz = param_count_flat(256, 3, 32, 32);
  CHECK(flat_nz.first_layer_weights == 256 * 3072);
}

TEST_CASE("stride identity kernels") {
  SUBCASE("required kernel counts") {
    CHECK(required_kernels(3, 2) == 48);
    CHECK(required_kernels(1, 1) == 4);
    CHECK(required_kernels(3, 0) == 3);
  }
  SUBCASE("L=0 is the identity") {
    const auto layers = build_stride_identity_kernels(1, 0);
    CHECK(layers.empty());
    const Tensor image = testsup::make_random_image(1, 1, 8, 8);
    const Tensor out = stride_downsample(image, layers);
    for (std::size_t i = 0; i < image.size(); ++i) CHECK(out[i] == image[i]);
  }
  SUBCASE("downsample then inverse rearrangement is bit-exact") {
    for (std::size_t L : {std::size_t(1), std::size_t(2)}) {
      for (std::size_t c : {std::size_t(1), std::size_t(3)}) {
        const auto layers = build_stride_identity_kernels(c, L);
        CHECK(layers.back().dim(0) == required_kernels(c, L));
        const Tensor image = testsup::make_random_image(7 * L + c, c, 16, 16);
        const Tensor down = stride_downsample(image, layers);
        CHECK(down.dim(0) == required_kernels(c, L));
        const Tensor back = stride_inverse(down, c, L, 16, 16);
        REQUIRE(back.shape() == image.shape());
        for (std::size_t i = 0; i < image.size(); ++i)
          CHECK(back[i] == image[i]);
      }
    }
  }
  SUBCASE("odd spatial dims are rejected") {
    const auto layers = build_stride_identity_kernels(1, 1);
    const Tensor image = testsup::make_random_image(3, 1, 7, 7);
    CHECK_THROWS_AS(stride_downsample(image, layers), std::invalid_argument);
  }
}

TEST_CASE("plan_assignments") {
  SUBCASE("100 clients, 85 sets, singles: 85 attacked + 15 masked") {
    const auto plan = plan_assignments(100, 85, 1);
    std::size_t attacked = 0, masked = 0;
    for (const auto& a : plan) (a.masked ? masked : attacked) += 1;
    CHECK(attacked == 85);
    CHECK(masked == 15);
    CHECK(num_groups(plan) == 85);
  }
  SUBCASE("mixed plan covers all 100 clients with 85 sets") {
    const auto plan = plan_assignments(100, 85, {{2, 15}, {1, 70}});
    for (const auto& a : plan) CHECK_FALSE(a.masked);
    CHECK(num_groups(plan) == 85);
    // First 15 groups hold 2 clients each.
    std::map<int, int> sizes;
    for (const auto& a : plan) sizes[a.share_group] += 1;
    for (int g = 0; g < 15; ++g) CHECK(sizes[g] == 2);
    for (int g = 15; g < 85; ++g) CHECK(sizes[g] == 1);
  }
  SUBCASE("0 sets masks everyone") {
    const auto plan = plan_assignments(10, 0, 1);
    for (const auto& a : plan) CHECK(a.masked);
  }
  SUBCASE("share groups: members share the group id, sets are per group") {
    const auto plan = plan_assignments(10, 5, 2);
    for (const auto& a : plan) {
      CHECK_FALSE(a.masked);
      CHECK(a.share_group == a.client_id / 2);
      CHECK(a.identity_set == a.share_group);
    }
  }
}
