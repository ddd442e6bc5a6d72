// rvc_bench: batch experiments for the decentralized NMPC swarm.
//
//   rvc_bench apcx        [--agents N --vmax V --amax A --rca R]
//   rvc_bench reliability [--duration S]
//   rvc_bench robustness  [--delays .. --rates .. --sigma-p .. --sigma-v ..]
//   rvc_bench ablation    [--variant full|no_time_dep|no_pmm|no_td_no_pmm]...
//   rvc_bench run <config.json>
//
// Common flags: --seed, --trials, --out <dir>, --parallel <k>, --traces.
// Exit codes: 0 ok, 1 success floor violated, 2 config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "rvcnmpc/bench.hpp"

using namespace rvcnmpc;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::string out = "out";
  int parallel = 1;
  bool traces = false;
  std::string config;
  std::optional<double> floor;
};

void add_common(CLI::App* app, Common& c, bool with_config = true) {
  app->add_option("--seed", c.seed, "Base seed; trial k uses seed + k");
  app->add_option("--trials", c.trials, "Number of trials");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--parallel", c.parallel, "Concurrent trials")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_flag("--traces", c.traces, "Write traces/trial_<k>.csv");
  app->add_option("--floor", c.floor, "Minimum success rate in percent")->check(CLI::Range(0.0, 100.0));
  if (with_config) app->add_option("--config", c.config, "Base config JSON (preset values are applied on top)");
}

ScenarioConfig base_config(const Common& c, ScenarioConfig preset) {
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("config: cannot open " + c.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    preset = config_from_json(j, preset);
  }
  return preset;
}

void apply_common(const Common& c, ScenarioConfig& cfg) {
  if (c.seed) cfg.seed = *c.seed;
  if (c.trials) cfg.trials = *c.trials;
  if (c.floor) cfg.success_floor = *c.floor;
}

void print_aggregate(const std::string& label, const AggregateReport& a, const TimingReport& t) {
  std::printf("%-14s success %5.1f%%  T_x %.3f+-%.3f (min %.3f)  dist %.2f+-%.2f  vel %.2f+-%.2f  "
              "min-dist %.3f (min %.3f)  solver %.2f/%.2f ms (mean/p99)\n",
              label.c_str(), a.success_rate, a.flight_time.mean, a.flight_time.std, a.flight_time.min,
              a.flight_distance.mean, a.flight_distance.std, a.flight_velocity.mean, a.flight_velocity.std,
              a.min_distance.mean, a.min_distance.min, t.mean_ms, t.p99_ms);
}

int batch(const Common& c, const ScenarioConfig& cfg, const std::string& label = "batch") {
  const BatchResult b = run_batch(cfg, {c.parallel, c.traces});
  write_batch(c.out, cfg, b);
  print_aggregate(label, b.aggregate, b.timing);
  if (cfg.kind == ScenarioKind::kRandomGoals)
    std::printf("goals reached %d, collisions %d\n", b.aggregate.goals_reached, b.aggregate.collisions);
  return b.aggregate.success_rate + 1e-9 < cfg.success_floor ? 1 : 0;
}

int grid(const Common& c, const ScenarioConfig& cfg) {
  const auto cells = run_robustness_grid(cfg, {c.parallel, false});
  fs::create_directories(c.out);
  write_grid_csv(fs::path(c.out) / "grid.csv", cells);
  nlohmann::json j;
  j["config"] = to_json(cfg);
  j["cells"] = nlohmann::json::array();
  bool ok = true;
  for (const auto& cell : cells) {
    std::printf("delay %.3f s  rate %6.1f Hz  sigma %.2f/%.2f  success %5.1f%%  min-dist %.3f\n", cell.delay,
                cell.rate, cell.sigma_p, cell.sigma_v, cell.aggregate.success_rate, cell.aggregate.min_distance.min);
    j["cells"].push_back({{"delay", cell.delay},
                          {"rate", cell.rate},
                          {"sigma_p", cell.sigma_p},
                          {"sigma_v", cell.sigma_v},
                          {"aggregate", to_json(cell.aggregate)}});
    ok = ok && cell.aggregate.success_rate + 1e-9 >= cfg.success_floor;
  }
  std::ofstream(fs::path(c.out) / "aggregate.json") << j.dump(2) << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch experiments for decentralized NMPC collision avoidance"};
  app.require_subcommand(1);

  Common apcx_c, rel_c, rob_c, abl_c, run_c;
  int agents = 10;
  double vmax = 20.0, amax = 40.0, rca = 0.6;
  auto* apcx = app.add_subcommand("apcx", "Antipodal circle swap");
  add_common(apcx, apcx_c);
  apcx->add_option("--agents", agents)->check(CLI::Range(2, 1000))->capture_default_str();
  apcx->add_option("--vmax", vmax)->check(CLI::PositiveNumber)->capture_default_str();
  apcx->add_option("--amax", amax)->check(CLI::PositiveNumber)->capture_default_str();
  apcx->add_option("--rca", rca)->check(CLI::PositiveNumber)->capture_default_str();

  double duration = 600.0;
  auto* rel = app.add_subcommand("reliability", "Random goal stream in a 20 x 20 x 1 m arena");
  add_common(rel, rel_c);
  rel->add_option("--duration", duration, "Simulated seconds")->check(CLI::PositiveNumber)->capture_default_str();

  std::vector<double> delays, rates, sigma_p, sigma_v;
  auto* rob = app.add_subcommand("robustness", "Delay x rate (x noise) grid on 4-agent APCX");
  add_common(rob, rob_c);
  rob->add_option("--delays", delays, "Delays in seconds");
  rob->add_option("--rates", rates, "Broadcast rates in Hz");
  rob->add_option("--sigma-p", sigma_p, "Position noise std values");
  rob->add_option("--sigma-v", sigma_v, "Velocity noise std values");

  std::vector<std::string> variants;
  auto* abl = app.add_subcommand("ablation", "Time-dependence and reference ablations on APCX-10");
  add_common(abl, abl_c);
  abl->add_option("--variant", variants, "Variants to run (default: all)")
      ->check(CLI::IsMember({"full", "no_time_dep", "no_pmm", "no_td_no_pmm"}));

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run a config file");
  add_common(run, run_c, false);
  run->add_option("config", config_path, "Config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*apcx) {
      ScenarioConfig cfg = base_config(apcx_c, apcx_config(agents, vmax, amax, rca));
      apply_common(apcx_c, cfg);
      return batch(apcx_c, cfg, "apcx");
    }
    if (*rel) {
      ScenarioConfig cfg = base_config(rel_c, reliability_config());
      cfg.duration = duration;
      apply_common(rel_c, cfg);
      return batch(rel_c, cfg, "reliability");
    }
    if (*rob) {
      ScenarioConfig cfg = base_config(rob_c, robustness_config());
      if (!delays.empty()) cfg.grid_delays = delays;
      if (!rates.empty()) cfg.grid_rates = rates;
      if (!sigma_p.empty()) cfg.grid_sigma_p = sigma_p;
      if (!sigma_v.empty()) cfg.grid_sigma_v = sigma_v;
      apply_common(rob_c, cfg);
      cfg.validate();
      return grid(rob_c, cfg);
    }
    if (*abl) {
      ScenarioConfig cfg = base_config(abl_c, apcx_config(10, 20.0, 40.0, 0.6));
      apply_common(abl_c, cfg);
      if (variants.empty()) variants = {"full", "no_time_dep", "no_pmm", "no_td_no_pmm"};
      int code = 0;
      nlohmann::json summary = nlohmann::json::object();
      for (const auto& name : variants) {
        Common sub = abl_c;
        sub.out = (fs::path(abl_c.out) / name).string();
        const ScenarioConfig vcfg = apply_variant(cfg, ablation_variant_from(name));
        code = std::max(code, batch(sub, vcfg, name));
        summary[name] = nlohmann::json::parse(std::ifstream(fs::path(sub.out) / "aggregate.json")).at("aggregate");
      }
      std::ofstream(fs::path(abl_c.out) / "aggregate.json") << summary.dump(2) << '\n';
      return code;
    }
    if (*run) {
      ScenarioConfig cfg = load_config(config_path);
      apply_common(run_c, cfg);
      cfg.validate();
      if (cfg.kind == ScenarioKind::kRobustnessGrid) return grid(run_c, cfg);
      return batch(run_c, cfg, "run");
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
