// Command-line front end: run, aggregate, oracle, check, presets.

#include "sidecar/sidecar.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

using namespace sidecar;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const auto v = std::stoull(item, &pos);
    if (pos != item.size()) throw harness::ConfigError("invalid seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw harness::ConfigError("--seeds must list at least one seed");
  return seeds;
}

int cmd_run(const std::string& config_path, const std::string& mode, const std::string& seeds,
            const std::string& out, int jobs) {
  auto cfg = harness::load_config(config_path);
  if (!mode.empty()) cfg.mode = harness::mode_from_string(mode);
  if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  const auto plans = harness::plan_runs(cfg);
  std::cout << "running " << plans.size() << " run(s) of " << cfg.name << " [" << harness::to_string(cfg.mode)
            << "] into " << cfg.out_dir << "\n";
  const auto res = harness::run_experiment(cfg, jobs);
  for (const auto& r : res.runs) {
    if (r.ok) {
      std::cout << "  ok     " << r.plan.run_id << "  rel_l2=" << r.final_record->rel_l2_error
                << "  structure_linf=" << r.final_record->structure_linf_error
                << "  L_solver=" << r.final_record->l_solver << "\n";
    } else {
      std::cout << "  FAILED " << r.plan.run_id << ": " << r.error << "\n";
    }
  }
  std::cout << "manifest: " << res.manifest_path << "\n";
  return res.all_ok() ? 0 : 1;
}

int cmd_aggregate(const std::string& in, const std::string& out) {
  const auto rows = harness::aggregate_directory(in, out);
  std::cout << "wrote " << rows.size() << " group(s) to " << out << "\n";
  return 0;
}

int cmd_oracle(const std::string& problem, int nx, int nt, const std::string& out) {
  const auto id = problems::problem_from_string(problem);
  if (id != problems::ProblemId::Ac1d) {
    std::cerr << "the nls1d reference is analytic; no field needs to be built\n";
    return 2;
  }
  const auto p = problems::ProblemSpec::ac1d();
  const auto f = reference::ac_fd_solve(p, nx, nt);
  reference::save_reference(f, out);
  std::cout << "wrote " << out << ": " << f.scheme << ", nx=" << f.nx << ", nt=" << f.nt << ", dx=" << f.dx
            << ", dt=" << f.dt << ", " << f.times.size() << " snapshots, energy " << f.step_energy.front() << " -> "
            << f.step_energy.back() << "\n";
  return 0;
}

int cmd_check() {
  bool ok = true;
  for (const auto& r : checks::run_invariant_battery()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << r.seconds << " s]\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_presets(const std::string& out) {
  std::filesystem::create_directories(out);
  for (const auto& name : harness::preset_names()) {
    const auto path = (std::filesystem::path(out) / (name + ".json")).string();
    harness::save_config(harness::preset(name), path);
    std::cout << "wrote " << path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  CLI::App app{"Sidecar structure-preserving PINN solver"};
  app.require_subcommand(1);

  std::string config, mode, seeds, out;
  int jobs = 1;
  auto* run = app.add_subcommand("run", "Train every (seed, width) run of an experiment");
  run->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--mode", mode, "sidecar | vanilla | no-struct | fit-only")
      ->check(CLI::IsMember({"sidecar", "vanilla", "no-struct", "fit-only"}));
  run->add_option("--seeds", seeds, "Comma-separated seed list overriding the config");
  run->add_option("--out", out, "Output directory overriding the config");
  run->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  std::string agg_in, agg_out;
  auto* aggregate = app.add_subcommand("aggregate", "Summarize final metrics over seeds");
  aggregate->add_option("--in", agg_in, "Directory of metrics CSV files")->required()->check(CLI::ExistingDirectory);
  aggregate->add_option("--out", agg_out, "Summary CSV path")->required();

  std::string problem = "ac1d", ref_out = "ref.bin";
  int nx = 512, nt = 10000;
  auto* oracle = app.add_subcommand("oracle", "Build a finite-difference reference field");
  oracle->add_option("--problem", problem, "Problem id")->check(CLI::IsMember({"ac1d", "nls1d"}));
  oracle->add_option("--nx", nx, "Spatial points")->check(CLI::Range(8, 1 << 22));
  oracle->add_option("--nt", nt, "Time steps")->check(CLI::Range(1, 1 << 30));
  oracle->add_option("--out", ref_out, "Output file");

  auto* check = app.add_subcommand("check", "Run the invariant battery");

  std::string presets_out = "configs";
  auto* presets = app.add_subcommand("presets", "Write the preset experiment configs");
  presets->add_option("--out", presets_out, "Output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, mode, seeds, out, jobs);
    if (*aggregate) return cmd_aggregate(agg_in, agg_out);
    if (*oracle) return cmd_oracle(problem, nx, nt, ref_out);
    if (*check) return cmd_check();
    if (*presets) return cmd_presets(presets_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
