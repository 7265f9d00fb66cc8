#include <cmath>

#include <doctest.h>

#include "fedleak/attack.hpp"
#include "fedleak/data.hpp"
#include "fedleak/fedsim.hpp"
#include "fedleak/metrics.hpp"
#include "fedleak/reconstruct.hpp"
#include "support/test_support.hpp"

using namespace fedleak;

namespace {

struct Pipeline {
  Deployment deployment;
  RoundConfig rc;
  std::vector<double> all_brightness;  // attacked images only
  RoundResult round;
  ReconstructionReport report;
  RoundLedger* ledger = nullptr;
};

// Full library-level pipeline on a small aggregation: build, simulate,
// de-aggregate, reconstruct, classify with ledger occupancy.
Pipeline run_pipeline(std::size_t clients, std::size_t batch,
                      std::size_t clients_per_model, Aggregation agg,
                      std::uint64_t seed, std::size_t max_sets = 0) {
  AttackModuleConfig cfg;
  cfg.in_channels = 1;
  cfg.height = cfg.width = 8;
  cfg.num_bins = 24;
  cfg.bias_mean = 0.5;
  cfg.bias_sd = 0.25;
  cfg.seed = seed;

  Pipeline p;
  const std::size_t groups = (clients + clients_per_model - 1) / clients_per_model;
  cfg.kernels = max_sets ? max_sets : std::max<std::size_t>(4, groups);
  p.deployment.assignments =
      plan_assignments(clients, max_identity_sets(cfg.kernels, 1),
                       clients_per_model);
  for (std::size_t g = 0; g < num_groups(p.deployment.assignments); ++g) {
    cfg.identity_set = int(g);
    p.deployment.group_modules.push_back(build_attack_module(cfg));
  }
  for (const auto& a : p.deployment.assignments)
    if (a.masked) p.deployment.any_masked = true;
  if (p.deployment.any_masked)
    p.deployment.masked_module =
        build_masked_module(cfg, MaskStyle::zero_kernels);

  std::vector<ImageBatch> batches;
  for (std::size_t c = 0; c < clients; ++c) {
    ImageBatch b;
    b.client_id = int(c);
    for (std::size_t i = 0; i < batch; ++i) {
      b.images.push_back(
          synth_image({0.5, 0.18}, 1, 8, 8, derive_seed(seed, c, i)));
      b.labels.push_back(int(i % 5));
    }
    batches.push_back(std::move(b));
  }

  p.rc.num_clients = clients;
  p.rc.batch_size = batch;
  p.rc.seed = seed;
  p.rc.aggregation = agg;
  p.round = run_round(p.deployment, std::move(batches), p.rc);

  const auto slices = deaggregate(p.round.aggregate.grads,
                                  p.deployment.assignments, 1);
  ReconstructOptions opt;
  opt.overlap = OverlapMode::oracle;
  for (const auto& s : slices) {
    const AttackModule& m =
        p.deployment.group_modules[std::size_t(s.share_group)];
    std::vector<int> occupancy(m.num_bins(), 0);
    for (const ClientLedger& cl : p.round.ledger.clients) {
      if (cl.masked || cl.share_group != s.share_group) continue;
      for (const LedgerImage& im : cl.images)
        if (im.bin >= 0) occupancy[std::size_t(im.bin)] += 1;
    }
    p.report.groups.push_back(reconstruct_group(
        s.share_group, s.identity_set, s.clients, s.w, m.bin_cutoffs, 1, 8, 8,
        opt, &occupancy));
  }
  return p;
}

}  // namespace

TEST_CASE("leakage accounting equals the brute-force bin-assignment oracle") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    CAPTURE(seed);
    Pipeline p = run_pipeline(5, 6, 1, Aggregation::plain, seed);
    const LeakageSummary summary = leakage_account(p.report, p.round.ledger);

    // Oracle: per share group, singleton bins over the ledger brightness.
    std::size_t oracle = 0;
    for (const GroupReport& g : p.report.groups) {
      std::vector<double> brightness;
      for (const ClientLedger& cl : p.round.ledger.clients)
        if (!cl.masked && cl.share_group == g.share_group)
          for (const LedgerImage& im : cl.images)
            brightness.push_back(im.brightness);
      const AttackModule& m =
          p.deployment.group_modules[std::size_t(g.share_group)];
      oracle += testsup::singleton_oracle(brightness, m.bin_cutoffs);
    }
    CHECK(summary.leaked_count == oracle);
    CHECK(summary.attacked_images == 30);
    CHECK(summary.total_images == 30);
    CHECK(summary.leakage_rate_attacked ==
          doctest::Approx(double(oracle) / 30.0));
  }
}

TEST_CASE("share groups pool their images into the same bins") {
  Pipeline p = run_pipeline(6, 4, 2, Aggregation::plain, 11);
  CHECK(p.report.groups.size() == 3);
  const LeakageSummary summary = leakage_account(p.report, p.round.ledger);
  // Oracle over pooled group brightness.
  std::size_t oracle = 0;
  for (const GroupReport& g : p.report.groups) {
    std::vector<double> brightness;
    for (const ClientLedger& cl : p.round.ledger.clients)
      if (!cl.masked && cl.share_group == g.share_group)
        for (const LedgerImage& im : cl.images)
          brightness.push_back(im.brightness);
    oracle += testsup::singleton_oracle(
        brightness,
        p.deployment.group_modules[std::size_t(g.share_group)].bin_cutoffs);
  }
  CHECK(summary.leaked_count == oracle);
}

TEST_CASE("masked clients count toward totals but not attacked images") {
  // 6 clients, only 4 identity sets available -> 2 masked.
  Pipeline p = run_pipeline(6, 4, 1, Aggregation::plain, 21, 4);
  std::size_t masked = 0;
  for (const auto& a : p.deployment.assignments) masked += a.masked;
  REQUIRE(masked == 2);
  const LeakageSummary summary = leakage_account(p.report, p.round.ledger);
  CHECK(summary.total_images == 24);
  CHECK(summary.attacked_images == 16);
}

TEST_CASE("secure aggregation preserves reconstructions to the fixed-point "
          "bound") {
  Pipeline plain = run_pipeline(4, 4, 1, Aggregation::plain, 31);
  Pipeline secure = run_pipeline(4, 4, 1, Aggregation::secure, 31);
  const LeakageSummary a = leakage_account(plain.report, plain.round.ledger);
  const LeakageSummary b = leakage_account(secure.report, secure.round.ledger);
  CHECK(a.leaked_count == b.leaked_count);
  // Reconstructed single-occupancy images agree within 1e-3 per pixel.
  for (std::size_t g = 0; g < plain.report.groups.size(); ++g) {
    for (std::size_t bin = 0; bin < plain.report.groups[g].bins.size(); ++bin) {
      const BinOutcome& oa = plain.report.groups[g].bins[bin];
      const BinOutcome& ob = secure.report.groups[g].bins[bin];
      CHECK((oa.kind == BinOutcomeKind::empty) ==
            (ob.kind == BinOutcomeKind::empty));
      if (oa.kind == BinOutcomeKind::empty ||
          ob.kind == BinOutcomeKind::empty)
        continue;
      for (std::size_t i = 0; i < oa.image.size(); ++i)
        CHECK(std::fabs(oa.image[i] - ob.image[i]) <= 1e-3);
    }
  }
}

TEST_CASE("all clients masked leaks nothing") {
  AttackModuleConfig cfg;
  cfg.in_channels = 1;
  cfg.height = cfg.width = 8;
  cfg.kernels = 4;
  cfg.num_bins = 8;
  cfg.bias_mean = 0.5;
  cfg.bias_sd = 0.25;
  Deployment d;
  d.assignments = {{0, -1, -1, true}, {1, -1, -1, true}};
  d.any_masked = true;
  d.masked_module = build_masked_module(cfg, MaskStyle::negative_conv_bias);

  std::vector<ImageBatch> batches;
  for (int c = 0; c < 2; ++c) {
    ImageBatch b;
    b.client_id = c;
    for (int i = 0; i < 3; ++i) {
      b.images.push_back(synth_image({0.5, 0.2}, 1, 8, 8, derive_seed(7, c, i)));
      b.labels.push_back(i);
    }
    batches.push_back(std::move(b));
  }
  RoundConfig rc;
  rc.num_clients = 2;
  rc.batch_size = 3;
  rc.aggregation = Aggregation::plain;
  const RoundResult r = run_round(d, std::move(batches), rc);
  CHECK(r.aggregate.grads.fc1_w.max_abs() == 0.0);

  ReconstructionReport rep;
  const LeakageSummary summary = leakage_account(rep, r.ledger);
  CHECK(summary.leaked_count == 0);
  CHECK(summary.attacked_images == 0);
  CHECK(summary.total_images == 6);
}
