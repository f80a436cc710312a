#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "macfl/analysis.hpp"
#include "macfl/experiment_config.hpp"
#include "macfl/fedcore.hpp"

/// Config files, data loading, runs, sweeps and trace files.
///
/// Config grammar: `[section]` headers, `key = value` lines, `#` starts a
/// comment. Strings may be double-quoted. Lists are `[a, b, c]` or bare
/// `a, b, c`; the adjacency matrix is `[[1,1],[1,1]]` or rows separated by `;`.
namespace macfl::harness {

/// Environment variable naming the directory relative dataset paths resolve against.
inline constexpr const char* kDataRootEnv = "MACFL_DATA_ROOT";

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Canonical text form; parse_config_text(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);

/// Throws ConfigError naming the field and its bound.
void validate(const ExperimentConfig& cfg);
/// Non-fatal remarks, e.g. fewer users than clusters.
std::vector<std::string> config_warnings(const ExperimentConfig& cfg);

/// Sets one key; `key` is bare (`p_s`) or qualified (`mobility.p_s`).
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);
std::vector<std::string> config_keys();

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

std::filesystem::path resolve_data_path(const std::string& name);

/// Train and test sets of the configured source, test set truncated to test_limit.
std::pair<data::LabeledDataset, data::LabeledDataset> load_datasets(const ExperimentConfig& cfg);
std::vector<data::Shard> make_shards(const ExperimentConfig& cfg, const data::LabeledDataset& train);
fed::ExperimentData load_data(const ExperimentConfig& cfg);

analysis::BoundInputs bound_inputs(const ExperimentConfig& cfg);

/// Probe points for the constant estimators: probe k is a fresh initialisation
/// followed by k * probe_steps SGD steps on the pooled user data.
std::vector<models::ParamVector> estimate_probes(const ExperimentConfig& cfg,
                                                 const fed::ExperimentData& data);
/// Estimates on the configured partition with users in their starting clusters.
analysis::ConstantEstimates estimate(const ExperimentConfig& cfg, const fed::ExperimentData& data);

void write_atomic(const std::filesystem::path& path, const std::string& content);

std::string trace_csv(const fed::MetricsTrace& trace);
std::string trace_json(const fed::MetricsTrace& trace);
/// Reads a file produced by trace_csv back, including the embedded config.
fed::MetricsTrace read_trace_csv(const std::filesystem::path& path);

std::string trace_stem(const ExperimentConfig& cfg);

struct RunOutput {
  fed::MetricsTrace trace;
  std::filesystem::path csv;
  std::optional<std::filesystem::path> json;
};

/// Runs one experiment and writes `<out_dir>/<series>_seed<seed>.csv` (and .json).
RunOutput run(const ExperimentConfig& cfg, const fed::ExperimentData& data);
RunOutput run(const ExperimentConfig& cfg);

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

struct SweepSpec {
  ExperimentConfig base;
  std::vector<SweepAxis> axes;
  std::vector<std::uint64_t> seeds;
};

/// A config file with an extra `[sweep]` section holding param1/values1,
/// optional param2/values2 and seeds.
SweepSpec parse_sweep_text(const std::string& text, const std::string& origin = "<sweep>");
SweepSpec parse_sweep(const std::filesystem::path& path);

struct SweepCell {
  std::string series;
  std::uint64_t seed = 0;
  ExperimentConfig config;
  std::optional<fed::MetricsTrace> trace;
  std::string error;
};

struct SummaryRow {
  std::string series;
  int seeds = 0;
  int failed = 0;
  double mean_final_accuracy = 0.0;
  double std_final_accuracy = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SummaryRow> summary;
};

/// Series label of a grid point, e.g. `hfl_ps0.5` or `macfl_k110_k22`.
std::string series_label(const ExperimentConfig& cfg, const std::vector<SweepAxis>& axes,
                         const std::vector<std::string>& values);

std::vector<SweepCell> expand_sweep(const SweepSpec& spec);
std::vector<SummaryRow> summarize(const std::vector<SweepCell>& cells);
std::string summary_csv(const std::vector<SummaryRow>& rows);

/// Runs every cell (in parallel), records per-cell failures, and when
/// `write_files` is set writes traces, summary.csv and plot data to base.out_dir.
SweepResult run_sweep(const SweepSpec& spec, bool write_files = true);

/// One long-format CSV (series,x,y) per recipe, y = test accuracy averaged over
/// the traces of a series at iteration x. Returns the written files.
std::vector<std::filesystem::path> emit_plotdata(const std::vector<fed::MetricsTrace>& traces,
                                                 const std::filesystem::path& out_dir);

/// Formats a double with the shortest representation that round-trips.
std::string format_double(double x);

}  // namespace macfl::harness
