#include "macfl/harness.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "macfl/errors.hpp"
#include "macfl/mobility.hpp"

namespace macfl::harness {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path resolve_data_path(const std::string& name) {
  fs::path p(name);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kDataRootEnv); root && *root) p = fs::path(root) / p;
  }
  if (!fs::exists(p)) {
    fs::path gz = p;
    gz += ".gz";
    if (fs::exists(gz)) return gz;
  }
  return p;
}

std::pair<data::LabeledDataset, data::LabeledDataset> load_datasets(const ExperimentConfig& cfg) {
  data::LabeledDataset train, test;
  if (cfg.source == "synthetic") {
    auto rtrain = make_rng(cfg.seed, Stream::synthetic_train);
    auto rtest = make_rng(cfg.seed, Stream::synthetic_test);
    const auto d = static_cast<std::size_t>(cfg.synth_dim), C = static_cast<std::size_t>(cfg.synth_classes);
    train = data::synth_gaussian_classes(static_cast<std::size_t>(cfg.synth_train_n), d, C,
                                         cfg.synth_separation, rtrain);
    test = data::synth_gaussian_classes(static_cast<std::size_t>(cfg.synth_test_n), d, C,
                                        cfg.synth_separation, rtest);
  } else {
    train = data::load_idx(resolve_data_path(cfg.train_images), resolve_data_path(cfg.train_labels));
    test = data::load_idx(resolve_data_path(cfg.test_images), resolve_data_path(cfg.test_labels));
  }
  if (cfg.test_limit > 0 && test.n > static_cast<std::size_t>(cfg.test_limit))
    test = data::head(test, static_cast<std::size_t>(cfg.test_limit));
  if (train.dim != cfg.model.input_dim || test.dim != cfg.model.input_dim)
    throw ConfigError("model.input_dim = " + std::to_string(cfg.model.input_dim) +
                      " but the data has dimension " + std::to_string(train.dim));
  if (std::max(train.n_classes, test.n_classes) > cfg.model.n_classes)
    throw ConfigError("model.n_classes = " + std::to_string(cfg.model.n_classes) +
                      " is smaller than the number of labels in the data");
  return {std::move(train), std::move(test)};
}

std::vector<data::Shard> make_shards(const ExperimentConfig& cfg, const data::LabeledDataset& train) {
  auto rng = make_rng(cfg.seed, Stream::partition);
  const auto M = static_cast<std::size_t>(cfg.n_users);
  const auto size = static_cast<std::size_t>(cfg.shard_size);
  if (cfg.partition == "pathological")
    return data::partition_pathological(train, M, size, static_cast<std::size_t>(cfg.classes_per_user), rng);
  return data::partition_iid(train, M, size, rng);
}

fed::ExperimentData load_data(const ExperimentConfig& cfg) {
  auto [train, test] = load_datasets(cfg);
  fed::ExperimentData d;
  d.shards = make_shards(cfg, train);
  d.train = std::make_shared<const data::LabeledDataset>(std::move(train));
  d.test = std::make_shared<const data::LabeledDataset>(std::move(test));
  return d;
}

analysis::BoundInputs bound_inputs(const ExperimentConfig& c) {
  analysis::BoundInputs in;
  in.eta = c.eta;
  in.p_s = c.p_s;
  in.T = c.resolved_cloud_rounds();
  in.L = c.bound_L;
  in.sigma = c.bound_sigma;
  in.G = c.bound_G;
  in.eps_c = c.bound_eps_c;
  in.eps_g = c.bound_eps_g;
  in.kappa1 = c.kappa1;
  in.kappa2 = c.kappa2;
  in.f0_gap = c.bound_f0_gap;
  in.M = static_cast<std::size_t>(c.n_users);
  in.N = static_cast<std::size_t>(c.n_clusters);
  in.alpha_user = c.alpha_user;
  in.alpha_user_cluster = c.alpha_user_cluster;
  in.alpha_cluster = c.alpha_cluster;
  in.sigma_M = c.bound_sigma_M;
  in.eps_Mc = c.bound_eps_Mc;
  in.eps_Mg = c.bound_eps_Mg;
  in.beta_user = c.beta_user;
  in.beta_user_cluster = c.beta_user_cluster;
  return in;
}

std::vector<models::ParamVector> estimate_probes(const ExperimentConfig& cfg,
                                                 const fed::ExperimentData& data) {
  data::Shard pooled;
  for (const auto& sh : data.shards) pooled.indices.insert(pooled.indices.end(), sh.indices.begin(), sh.indices.end());
  const auto grad = models::gradient_fn(cfg.model);
  std::vector<models::ParamVector> probes;
  for (int k = 0; k < cfg.estimate_probes; ++k) {
    const auto index = (std::uint64_t{1} << 40) + static_cast<std::uint64_t>(k);
    auto init = make_rng(cfg.seed, Stream::estimate, index);
    auto w = models::init_params(cfg.model, init);
    const int steps = k * cfg.estimate_probe_steps;
    if (steps > 0) {
      fed::BatchSampler sampler(*data.train, pooled, static_cast<std::size_t>(cfg.batch_size),
                                make_rng(cfg.seed, Stream::estimate, index + (std::uint64_t{1} << 20)),
                                make_rng(cfg.seed, Stream::estimate, index + (std::uint64_t{2} << 20)));
      w = fed::local_update(grad, std::move(w), sampler, cfg.eta, steps).params;
    }
    probes.push_back(std::move(w));
  }
  return probes;
}

analysis::ConstantEstimates estimate(const ExperimentConfig& cfg, const fed::ExperimentData& data) {
  const analysis::ModelOracle oracle(cfg.model, *data.train, data.shards,
                                     static_cast<std::size_t>(cfg.batch_size));
  auto rng = make_rng(cfg.seed, Stream::assignment);
  const auto states = mobility::initial_states(static_cast<std::size_t>(cfg.n_users),
                                               static_cast<std::size_t>(cfg.n_clusters), rng,
                                               cfg.balanced_start);
  analysis::EstimateOptions opts;
  for (const auto& s : states) opts.cluster_of.push_back(s.cluster);
  opts.batch_budget = cfg.estimate_batch_budget;
  opts.rho = cfg.rho;
  opts.seed = cfg.seed;
  const auto probes = estimate_probes(cfg, data);
  return analysis::estimate_constants(oracle, probes, opts);
}

void write_atomic(const fs::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string trace_stem(const ExperimentConfig& cfg) {
  return cfg.series_label() + "_seed" + std::to_string(cfg.seed);
}

std::string trace_csv(const fed::MetricsTrace& tr) {
  const auto& cfg = tr.config;
  std::ostringstream out;
  out << "# series: " << cfg.series_label() << "\n";
  out << "# recipe: " << cfg.recipe << "\n";
  out << "# seed: " << cfg.seed << "\n";
  out << "# diverged: " << (tr.diverged ? "true" : "false") << "\n";
  if (!tr.error.empty()) out << "# error: " << tr.error << "\n";
  out << "# config-begin\n";
  std::istringstream lines(serialize_config(cfg));
  for (std::string line; std::getline(lines, line);) out << "# " << line << "\n";
  out << "# config-end\n";
  out << "round,t,algorithm,global_loss,global_accuracy,mean_cluster_accuracy,participants\n";
  const auto alg = to_string(cfg.algorithm);
  for (const auto& r : tr.records)
    out << r.round << ',' << r.t << ',' << alg << ',' << format_double(r.global_loss) << ','
        << format_double(r.global_accuracy) << ',' << format_double(r.mean_cluster_accuracy) << ','
        << r.participants << "\n";
  return out.str();
}

namespace {

json config_json(const ExperimentConfig& cfg) {
  json out = json::object();
  for (const auto& qualified : config_keys()) {
    const auto dot = qualified.find('.');
    const auto text = get_config_value(cfg, qualified);
    out[qualified.substr(0, dot)][qualified.substr(dot + 1)] = json::parse(text);
  }
  return out;
}

double to_double(const std::string& s, const fs::path& path) {
  double x = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw FormatError(path.string() + ": bad number '" + s + "'");
  return x;
}

}  // namespace

std::string trace_json(const fed::MetricsTrace& tr) {
  json j;
  j["series"] = tr.config.series_label();
  j["recipe"] = tr.config.recipe;
  j["seed"] = tr.config.seed;
  j["diverged"] = tr.diverged;
  j["error"] = tr.error;
  j["config"] = config_json(tr.config);
  j["records"] = json::array();
  for (const auto& r : tr.records) {
    json rec{{"round", r.round},
             {"t", r.t},
             {"global_loss", r.global_loss},
             {"global_accuracy", r.global_accuracy},
             {"mean_cluster_accuracy", r.mean_cluster_accuracy},
             {"cluster_accuracy", r.cluster_accuracy},
             {"participants", r.participants}};
    if (tr.config.record_wall_time) rec["wall_time_s"] = r.wall_time_s;
    j["records"].push_back(std::move(rec));
  }
  return j.dump(1) + "\n";
}

fed::MetricsTrace read_trace_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  fed::MetricsTrace tr;
  std::string line, config_text;
  bool in_config = false, saw_config = false, saw_header = false;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) {
      const std::string body = line.size() > 2 ? line.substr(2) : "";
      if (body == "config-begin") in_config = true;
      else if (body == "config-end") in_config = false, saw_config = true;
      else if (in_config) config_text += body + "\n";
      else if (body.rfind("diverged: ", 0) == 0) tr.diverged = body.substr(10) == "true";
      else if (body.rfind("error: ", 0) == 0) tr.error = body.substr(7);
      continue;
    }
    if (line.empty()) continue;
    if (!saw_header) {
      if (line.rfind("round,t,algorithm", 0) != 0) throw FormatError(path.string() + ": missing CSV header");
      saw_header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw FormatError(path.string() + ": expected 7 columns");
    fed::TraceRecord r;
    r.round = static_cast<int>(to_double(f[0], path));
    r.t = static_cast<long>(to_double(f[1], path));
    r.global_loss = to_double(f[3], path);
    r.global_accuracy = to_double(f[4], path);
    r.mean_cluster_accuracy = to_double(f[5], path);
    r.participants = static_cast<int>(to_double(f[6], path));
    tr.records.push_back(std::move(r));
  }
  if (!saw_config) throw FormatError(path.string() + ": no embedded config");
  tr.config = parse_config_text(config_text, path.string());
  return tr;
}

RunOutput run(const ExperimentConfig& cfg, const fed::ExperimentData& data) {
  validate(cfg);
  RunOutput out{fed::run_experiment(cfg, data), {}, std::nullopt};
  const fs::path dir(cfg.out_dir);
  const auto stem = trace_stem(cfg);
  out.csv = dir / (stem + ".csv");
  write_atomic(out.csv, trace_csv(out.trace));
  if (cfg.write_json) {
    out.json = dir / (stem + ".json");
    write_atomic(*out.json, trace_json(out.trace));
  }
  return out;
}

RunOutput run(const ExperimentConfig& cfg) {
  validate(cfg);
  return run(cfg, load_data(cfg));
}

namespace {

std::string bare_key(const std::string& key) {
  const auto dot = key.find('.');
  return dot == std::string::npos ? key : key.substr(dot + 1);
}

std::string axis_prefix(const std::string& key) {
  static const std::map<std::string, std::string> abbrev{
      {"p_s", "ps"}, {"kappa1", "k1"}, {"kappa2", "k2"}, {"n_users", "M"},
      {"n_clusters", "N"}, {"partition", ""}, {"kind", ""}};
  const auto k = bare_key(key);
  const auto it = abbrev.find(k);
  return it == abbrev.end() ? k : it->second;
}

std::string normalize_value(const std::string& v) {
  double x = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec == std::errc() && r.ptr == v.data() + v.size() && !v.empty()) return format_double(x);
  return v;
}

// Loaded datasets are shared between cells with the same data settings.
std::string data_key(const ExperimentConfig& c) {
  std::string k = c.source + "|" + std::to_string(c.test_limit) + "|" +
                  std::to_string(c.model.input_dim) + "|" + std::to_string(c.model.n_classes);
  if (c.source == "synthetic")
    return k + "|" + std::to_string(c.seed) + "|" + std::to_string(c.synth_train_n) + "|" +
           std::to_string(c.synth_test_n) + "|" + std::to_string(c.synth_dim) + "|" +
           std::to_string(c.synth_classes) + "|" + format_double(c.synth_separation);
  return k + "|" + c.train_images + "|" + c.train_labels + "|" + c.test_images + "|" + c.test_labels;
}

}  // namespace

std::string series_label(const ExperimentConfig& cfg, const std::vector<SweepAxis>& axes,
                         const std::vector<std::string>& values) {
  bool alg_swept = false;
  for (const auto& a : axes) alg_swept |= bare_key(a.key) == "algorithm";
  const auto alg = to_string(cfg.algorithm);
  std::string label = cfg.label.empty() ? alg : (alg_swept ? cfg.label + "_" + alg : cfg.label);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (bare_key(axes[i].key) == "algorithm") continue;
    label += "_" + axis_prefix(axes[i].key) + normalize_value(values.at(i));
  }
  return label;
}

std::vector<SweepCell> expand_sweep(const SweepSpec& spec) {
  std::vector<SweepCell> cells;
  std::vector<std::vector<std::string>> points{{}};
  for (const auto& axis : spec.axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& p : points)
      for (const auto& v : axis.values) {
        auto q = p;
        q.push_back(v);
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  for (const auto& p : points) {
    for (auto seed : spec.seeds) {
      SweepCell cell;
      cell.seed = seed;
      cell.config = spec.base;
      try {
        for (std::size_t i = 0; i < p.size(); ++i) set_config_value(cell.config, spec.axes[i].key, p[i]);
        cell.config.seed = seed;
        cell.series = series_label(cell.config, spec.axes, p);
        cell.config.label = cell.series;
        validate(cell.config);
      } catch (const std::exception& e) {
        if (cell.series.empty()) cell.series = "invalid";
        cell.error = e.what();
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::vector<SummaryRow> summarize(const std::vector<SweepCell>& cells) {
  std::vector<SummaryRow> rows;
  std::map<std::string, std::vector<double>> finals;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& r) { return r.series == c.series; });
    if (it == rows.end()) {
      rows.push_back({c.series, 0, 0, 0.0, 0.0});
      it = rows.end() - 1;
    }
    ++it->seeds;
    if (c.trace && !c.trace->diverged && !c.trace->records.empty() && c.error.empty())
      finals[c.series].push_back(c.trace->records.back().global_accuracy);
    else
      ++it->failed;
  }
  for (auto& r : rows) {
    const auto& v = finals[r.series];
    if (v.empty()) {
      r.mean_final_accuracy = std::nan("");
      r.std_final_accuracy = std::nan("");
      continue;
    }
    double sum = 0.0;
    for (double x : v) sum += x;
    r.mean_final_accuracy = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean_final_accuracy) * (x - r.mean_final_accuracy);
    r.std_final_accuracy = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "series,seeds,failed,mean_final_accuracy,std_final_accuracy\n";
  for (const auto& r : rows)
    out += r.series + "," + std::to_string(r.seeds) + "," + std::to_string(r.failed) + "," +
           format_double(r.mean_final_accuracy) + "," + format_double(r.std_final_accuracy) + "\n";
  return out;
}

SweepResult run_sweep(const SweepSpec& spec, bool write_files) {
  SweepResult result;
  result.cells = expand_sweep(spec);

  std::map<std::string, std::shared_ptr<const std::pair<data::LabeledDataset, data::LabeledDataset>>> cache;
  std::map<std::string, std::string> load_errors;
  for (const auto& c : result.cells) {
    if (!c.error.empty()) continue;
    const auto key = data_key(c.config);
    if (cache.count(key) || load_errors.count(key)) continue;
    try {
      cache[key] = std::make_shared<const std::pair<data::LabeledDataset, data::LabeledDataset>>(
          load_datasets(c.config));
    } catch (const std::exception& e) {
      load_errors[key] = e.what();
    }
  }

  auto& cells = result.cells;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(cells.size()); ++i) {
    auto& cell = cells[static_cast<std::size_t>(i)];
    if (!cell.error.empty()) continue;
    try {
      const auto key = data_key(cell.config);
      if (auto it = load_errors.find(key); it != load_errors.end()) throw ConfigError(it->second);
      const auto& sets = cache.at(key);
      fed::ExperimentData d;
      d.shards = make_shards(cell.config, sets->first);
      d.train = std::shared_ptr<const data::LabeledDataset>(sets, &sets->first);
      d.test = std::shared_ptr<const data::LabeledDataset>(sets, &sets->second);
      cell.trace = fed::run_experiment(cell.config, d);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  }

  result.summary = summarize(cells);
  if (write_files) {
    const fs::path dir(spec.base.out_dir);
    std::vector<fed::MetricsTrace> traces;
    for (const auto& c : cells) {
      if (!c.trace) continue;
      write_atomic(dir / (trace_stem(c.config) + ".csv"), trace_csv(*c.trace));
      if (c.config.write_json) write_atomic(dir / (trace_stem(c.config) + ".json"), trace_json(*c.trace));
      traces.push_back(*c.trace);
    }
    write_atomic(dir / "summary.csv", summary_csv(result.summary));
    if (!traces.empty()) emit_plotdata(traces, dir);
  }
  return result;
}

std::vector<fs::path> emit_plotdata(const std::vector<fed::MetricsTrace>& traces, const fs::path& out_dir) {
  if (traces.empty()) throw InvalidArgument("emit_plotdata: no traces");
  std::vector<std::string> recipes;
  for (const auto& t : traces)
    if (std::find(recipes.begin(), recipes.end(), t.config.recipe) == recipes.end())
      recipes.push_back(t.config.recipe);

  std::vector<fs::path> written;
  for (const auto& recipe : recipes) {
    std::vector<std::string> order;
    std::map<std::string, std::map<long, std::pair<double, int>>> acc;
    for (const auto& t : traces) {
      if (t.config.recipe != recipe) continue;
      const auto s = t.config.series_label();
      if (!acc.count(s)) order.push_back(s);
      auto& series = acc[s];
      for (const auto& r : t.records) {
        auto& cell = series[r.t];
        cell.first += r.global_accuracy;
        cell.second += 1;
      }
    }
    std::string out = "series,x,y\n";
    for (const auto& s : order)
      for (const auto& [x, sc] : acc[s])
        out += s + "," + std::to_string(x) + "," + format_double(sc.first / sc.second) + "\n";
    const auto path = out_dir / ("plotdata_" + recipe + ".csv");
    write_atomic(path, out);
    written.push_back(path);
  }
  return written;
}

}  // namespace macfl::harness
