// macfl: run, sweep, bounds, estimate, plotdata.
// Exit codes: 0 success, 1 configuration or input error, 2 numeric divergence.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "macfl/analysis.hpp"
#include "macfl/errors.hpp"
#include "macfl/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace macfl;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDiverged = 2;

void print_warnings(const ExperimentConfig& cfg) {
  for (const auto& w : harness::config_warnings(cfg)) std::cerr << "warning: " << w << "\n";
}

json bound_json(const analysis::BoundValue& v) {
  json terms = json::object();
  for (const auto& [name, x] : v.terms) terms[name] = static_cast<double>(x);
  return {{"value", static_cast<double>(v.value)}, {"terms", terms}};
}

int cmd_run(const std::string& path, const std::string& out_dir, const std::string& execution) {
  auto cfg = harness::parse_config(path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!execution.empty()) harness::set_config_value(cfg, "execution", execution);
  print_warnings(cfg);
  const auto out = harness::run(cfg);
  std::cout << "trace: " << out.csv.string() << "\n";
  if (out.trace.diverged) {
    std::cerr << "diverged: " << out.trace.error << "\n";
    return kDiverged;
  }
  if (!out.trace.records.empty()) {
    const auto& r = out.trace.records.back();
    std::printf("final: t=%ld accuracy=%.4f loss=%.6f participants=%d\n", r.t, r.global_accuracy,
                r.global_loss, r.participants);
  }
  return kOk;
}

int cmd_sweep(const std::string& path, const std::string& out_dir) {
  auto spec = harness::parse_sweep(path);
  if (!out_dir.empty()) spec.base.out_dir = out_dir;
  print_warnings(spec.base);
  const auto result = harness::run_sweep(spec);
  for (const auto& c : result.cells)
    if (!c.error.empty()) std::cerr << "cell " << c.series << " seed " << c.seed << ": " << c.error << "\n";
  std::printf("%-28s %6s %6s %10s %10s\n", "series", "seeds", "failed", "mean_acc", "std_acc");
  for (const auto& r : result.summary)
    std::printf("%-28s %6d %6d %10.4f %10.4f\n", r.series.c_str(), r.seeds, r.failed,
                r.mean_final_accuracy, r.std_final_accuracy);
  return kOk;
}

int cmd_bounds(const std::string& path) {
  const auto cfg = harness::parse_config(path);
  const auto in = harness::bound_inputs(cfg);
  json out;
  out["eta"] = in.eta;
  out["eta_cap"] = analysis::eta_cap(in.L, in.kappa1, in.kappa2);
  out["T"] = in.T;
  int code = kOk;
  try {
    out["hfl"] = bound_json(analysis::hfl_bound(in));
    out["corollary"] = bound_json(analysis::corollary_bound(in));
  } catch (const NumericDivergence& e) {
    out["hfl"] = {{"error", e.what()}};
    code = kDiverged;
  }
  out["macfl"] = bound_json(analysis::macfl_bound(in));
  std::cout << out.dump(2) << "\n";
  return code;
}

int cmd_estimate(const std::string& path) {
  const auto cfg = harness::parse_config(path);
  const auto data = harness::load_data(cfg);
  const auto e = harness::estimate(cfg, data);
  const json out{{"partition", cfg.partition}, {"probes", e.probes},  {"sigma", e.sigma},
                 {"G", e.G},                   {"eps_c", e.eps_c},    {"eps_g", e.eps_g},
                 {"L", e.L},                   {"sigma_M", e.sigma_M}};
  std::cout << out.dump(2) << "\n";
  return kOk;
}

int cmd_plotdata(const std::string& dir, const std::string& out_dir) {
  std::vector<fed::MetricsTrace> traces;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".csv" || name == "summary.csv" || name.rfind("plotdata_", 0) == 0)
      continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) traces.push_back(harness::read_trace_csv(f));
  if (traces.empty()) {
    std::cerr << "no trace files in " << dir << "\n";
    return kConfigError;
  }
  for (const auto& p : harness::emit_plotdata(traces, out_dir.empty() ? fs::path(dir) : fs::path(out_dir)))
    std::cout << p.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical federated learning with mobile users: simulator and bounds"};
  app.require_subcommand(1);

  std::string config, out_dir, execution, dir;
  auto* run = app.add_subcommand("run", "run one experiment and write its trace");
  run->add_option("config", config, "config file")->required();
  run->add_option("--out-dir", out_dir, "override [output] out_dir");
  run->add_option("--execution", execution, "serial or parallel");

  auto* sweep = app.add_subcommand("sweep", "run a parameter grid over seeds");
  sweep->add_option("spec", config, "sweep file")->required();
  sweep->add_option("--out-dir", out_dir, "override [output] out_dir");

  auto* bounds = app.add_subcommand("bounds", "evaluate the convergence bounds as JSON");
  bounds->add_option("config", config, "config file")->required();

  auto* est = app.add_subcommand("estimate", "estimate sigma, G, eps_c, eps_g, L on the configured data");
  est->add_option("config", config, "config file")->required();

  auto* plot = app.add_subcommand("plotdata", "turn a directory of traces into series,x,y files");
  plot->add_option("dir", dir, "trace directory")->required();
  plot->add_option("--out-dir", out_dir, "where to write (default: dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config, out_dir, execution);
    if (*sweep) return cmd_sweep(config, out_dir);
    if (*bounds) return cmd_bounds(config);
    if (*est) return cmd_estimate(config);
    if (*plot) return cmd_plotdata(dir, out_dir);
  } catch (const NumericDivergence& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
