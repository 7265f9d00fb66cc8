#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedleak/experiment.hpp"

namespace {

std::vector<std::size_t> parse_values(const std::string& list) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < list.size()) {
    std::size_t next = list.find(',', pos);
    if (next == std::string::npos) next = list.size();
    out.push_back(std::stoull(list.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (out.empty()) throw std::invalid_argument("empty value list");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  for (std::size_t v : parse_values(list)) out.push_back(v);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedleak: gradient-leakage experiments against FedSGD with "
               "secure aggregation"};
  app.require_subcommand(1);

  std::string run_config;
  auto* run_cmd = app.add_subcommand("run", "run one experiment config");
  run_cmd->add_option("config", run_config, "JSON config file")->required();

  std::string sweep_config, sweep_axis, sweep_values, sweep_seeds;
  bool no_baselines = false;
  auto* sweep_cmd =
      app.add_subcommand("sweep", "run a config across an axis of values");
  sweep_cmd->add_option("config", sweep_config, "JSON config file")->required();
  sweep_cmd->add_option("--axis", sweep_axis,
                        "clients|batch|clients_per_model|fc_size")
      ->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")
      ->required();
  sweep_cmd->add_option("--seeds", sweep_seeds,
                        "comma-separated seeds to average over");
  sweep_cmd->add_flag("--no-baselines", no_baselines,
                      "skip the flat-imprint baseline columns");

  std::string dump_dir;
  auto* dump_cmd = app.add_subcommand(
      "dump-images", "render reconstruction grids from a results directory");
  dump_cmd->add_option("results", dump_dir, "results directory of a run")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      const auto cfg = fedleak::ExperimentConfig::from_json_file(run_config);
      const auto result = fedleak::run_experiment(cfg);
      for (const auto& r : result.rounds) {
        std::printf(
            "round %zu: leaked %zu of %zu attacked (%zu total) | rate "
            "attacked %.2f%% total %.2f%%\n",
            r.round, r.leakage.leaked_count, r.leakage.attacked_images,
            r.leakage.total_images, 100.0 * r.leakage.leakage_rate_attacked,
            100.0 * r.leakage.leakage_rate_total);
      }
      if (!result.output_dir.empty())
        std::printf("outputs written to %s\n", result.output_dir.c_str());
    } else if (sweep_cmd->parsed()) {
      const auto cfg = fedleak::ExperimentConfig::from_json_file(sweep_config);
      fedleak::SweepOptions opt;
      opt.baselines = !no_baselines;
      if (!sweep_seeds.empty()) opt.seeds = parse_seeds(sweep_seeds);
      const auto points =
          fedleak::run_sweep(cfg, fedleak::parse_sweep_axis(sweep_axis),
                             parse_values(sweep_values), opt);
      std::printf(
          "value, rate_attacked, rate_total, flat_same_bins, "
          "flat_same_total, flat_same_nonzero\n");
      for (const auto& p : points) {
        std::printf("%zu, %.4f, %.4f, %.4f, %.4f, %.4f\n", p.value,
                    p.mandrake_rate, p.mandrake_rate_total, p.flat_same_bins,
                    p.flat_same_total, p.flat_same_nonzero);
      }
      if (!cfg.output_dir.empty())
        std::printf("sweep.csv written to %s\n", cfg.output_dir.c_str());
    } else if (dump_cmd->parsed()) {
      const int n = fedleak::dump_images(dump_dir);
      std::printf("wrote %d grid image(s) under %s/grids\n", n,
                  dump_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
