#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "macfl/errors.hpp"
#include "macfl/harness.hpp"

namespace macfl::harness {

std::string format_double(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace {

using Cfg = ExperimentConfig;

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::string quote(const std::string& s) { return "\"" + s + "\""; }

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError("key '" + key + "': cannot parse '" + value + "' as " + want);
}

long long parse_int(const std::string& key, const std::string& raw) {
  const auto v = unquote(trim(raw));
  long long out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return out;
}

int parse_int32(const std::string& key, const std::string& raw) {
  const auto v = parse_int(key, raw);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError("key '" + key + "': value out of range");
  return static_cast<int>(v);
}

double parse_double(const std::string& key, const std::string& raw) {
  const auto v = unquote(trim(raw));
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  auto v = unquote(trim(raw));
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> split_list(const std::string& raw) {
  auto v = trim(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') return {v};
    v = v.substr(1, v.size() - 2);
  }
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  for (const auto& s : split_list(raw)) out.push_back(parse_double(key, s));
  return out;
}

std::string format_double_list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s + "]";
}

std::vector<std::vector<int>> parse_matrix(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  std::vector<std::vector<int>> out;
  if (v.empty() || v == "[]") return out;
  if (v.front() == '[') {
    try {
      return nlohmann::json::parse(v).get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception&) {
      bad_value(key, v, "a 0/1 matrix");
    }
  }
  std::stringstream rows(v);
  std::string row;
  while (std::getline(rows, row, ';')) {
    std::replace(row.begin(), row.end(), ',', ' ');
    std::stringstream cells(row);
    std::vector<int> r;
    std::string cell;
    while (cells >> cell) r.push_back(parse_int32(key, cell));
    if (!r.empty()) out.push_back(std::move(r));
  }
  return out;
}

std::string format_matrix(const std::vector<std::vector<int>>& m) {
  std::string s = "[";
  for (std::size_t i = 0; i < m.size(); ++i) {
    s += i ? ", [" : "[";
    for (std::size_t j = 0; j < m[i].size(); ++j) s += (j ? "," : "") + std::to_string(m[i][j]);
    s += "]";
  }
  return s + "]";
}

std::string to_string(Execution e) { return e == Execution::serial ? "serial" : "parallel"; }

template <class E>
E parse_enum(const std::string& key, const std::string& raw, std::initializer_list<E> options) {
  const auto v = unquote(trim(raw));
  for (E e : options)
    if (to_string(e) == v) return e;
  std::string want = "one of";
  for (E e : options) want += " " + to_string(e);
  bad_value(key, v, want);
}

struct Key {
  std::string section;
  std::string name;
  std::function<std::string(const Cfg&)> get;
  std::function<void(Cfg&, const std::string&)> set;
};

Key int_key(const char* sec, const char* name, int Cfg::*field) {
  return {sec, name, [field](const Cfg& c) { return std::to_string(c.*field); },
          [field, name](Cfg& c, const std::string& v) { c.*field = parse_int32(name, v); }};
}

Key double_key(const char* sec, const char* name, double Cfg::*field) {
  return {sec, name, [field](const Cfg& c) { return format_double(c.*field); },
          [field, name](Cfg& c, const std::string& v) { c.*field = parse_double(name, v); }};
}

Key bool_key(const char* sec, const char* name, bool Cfg::*field) {
  return {sec, name, [field](const Cfg& c) { return std::string(c.*field ? "true" : "false"); },
          [field, name](Cfg& c, const std::string& v) { c.*field = parse_bool(name, v); }};
}

Key string_key(const char* sec, const char* name, std::string Cfg::*field) {
  return {sec, name, [field](const Cfg& c) { return quote(c.*field); },
          [field](Cfg& c, const std::string& v) { c.*field = unquote(trim(v)); }};
}

Key list_key(const char* sec, const char* name, std::vector<double> Cfg::*field) {
  return {sec, name, [field](const Cfg& c) { return format_double_list(c.*field); },
          [field, name](Cfg& c, const std::string& v) { c.*field = parse_double_list(name, v); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back({"experiment", "algorithm", [](const Cfg& c) { return quote(to_string(c.algorithm)); },
                 [](Cfg& c, const std::string& v) {
                   c.algorithm = parse_enum("algorithm", v, {Algorithm::hfl, Algorithm::macfl});
                 }});
    k.push_back({"experiment", "seed", [](const Cfg& c) { return std::to_string(c.seed); },
                 [](Cfg& c, const std::string& v) {
                   const auto s = unquote(trim(v));
                   std::uint64_t out = 0;
                   auto r = std::from_chars(s.data(), s.data() + s.size(), out);
                   if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty())
                     bad_value("seed", s, "an unsigned 64-bit integer");
                   c.seed = out;
                 }});
    k.push_back(int_key("experiment", "n_users", &Cfg::n_users));
    k.push_back(int_key("experiment", "n_clusters", &Cfg::n_clusters));
    k.push_back(int_key("experiment", "kappa1", &Cfg::kappa1));
    k.push_back(int_key("experiment", "kappa2", &Cfg::kappa2));
    k.push_back(int_key("experiment", "total_iterations", &Cfg::total_iterations));
    k.push_back(int_key("experiment", "cloud_rounds", &Cfg::cloud_rounds));
    k.push_back(double_key("experiment", "eta", &Cfg::eta));
    k.push_back(int_key("experiment", "batch_size", &Cfg::batch_size));
    k.push_back(int_key("experiment", "eval_every", &Cfg::eval_every));
    k.push_back(bool_key("experiment", "eval_clusters", &Cfg::eval_clusters));
    k.push_back({"experiment", "execution", [](const Cfg& c) { return quote(to_string(c.execution)); },
                 [](Cfg& c, const std::string& v) {
                   c.execution = parse_enum("execution", v, {Execution::serial, Execution::parallel});
                 }});

    k.push_back(string_key("mobility", "topology", &Cfg::topology));
    k.push_back({"mobility", "adjacency", [](const Cfg& c) { return format_matrix(c.adjacency); },
                 [](Cfg& c, const std::string& v) { c.adjacency = parse_matrix("adjacency", v); }});
    k.push_back(double_key("mobility", "p_s", &Cfg::p_s));
    k.push_back(list_key("mobility", "stay_probs", &Cfg::stay_probs));
    k.push_back({"mobility", "cadence", [](const Cfg& c) { return quote(to_string(c.cadence)); },
                 [](Cfg& c, const std::string& v) {
                   c.cadence = parse_enum("cadence", v,
                                          {MobilityCadence::edge_round, MobilityCadence::iteration});
                 }});
    k.push_back(bool_key("mobility", "balanced_start", &Cfg::balanced_start));

    k.push_back(string_key("data", "source", &Cfg::source));
    k.push_back(string_key("data", "train_images", &Cfg::train_images));
    k.push_back(string_key("data", "train_labels", &Cfg::train_labels));
    k.push_back(string_key("data", "test_images", &Cfg::test_images));
    k.push_back(string_key("data", "test_labels", &Cfg::test_labels));
    k.push_back(string_key("data", "partition", &Cfg::partition));
    k.push_back(int_key("data", "shard_size", &Cfg::shard_size));
    k.push_back(int_key("data", "classes_per_user", &Cfg::classes_per_user));
    k.push_back(int_key("data", "test_limit", &Cfg::test_limit));
    k.push_back(int_key("data", "loss_sample_cap", &Cfg::loss_sample_cap));
    k.push_back(int_key("data", "synth_train_n", &Cfg::synth_train_n));
    k.push_back(int_key("data", "synth_test_n", &Cfg::synth_test_n));
    k.push_back(int_key("data", "synth_dim", &Cfg::synth_dim));
    k.push_back(int_key("data", "synth_classes", &Cfg::synth_classes));
    k.push_back(double_key("data", "synth_separation", &Cfg::synth_separation));

    k.push_back({"model", "kind", [](const Cfg& c) { return quote(models::to_string(c.model.kind)); },
                 [](Cfg& c, const std::string& v) {
                   try {
                     c.model.kind = models::model_kind_from_string(unquote(trim(v)));
                   } catch (const std::exception&) {
                     bad_value("kind", v, "one of softmax mlp");
                   }
                 }});
    auto size_key = [](const char* name, std::size_t models::ModelSpec::*field) {
      return Key{"model", name, [field](const Cfg& c) { return std::to_string(c.model.*field); },
                 [field, name](Cfg& c, const std::string& v) {
                   const auto x = parse_int(name, v);
                   if (x < 1) throw ConfigError(std::string("model.") + name + ": must be >= 1");
                   c.model.*field = static_cast<std::size_t>(x);
                 }};
    };
    k.push_back(size_key("input_dim", &models::ModelSpec::input_dim));
    k.push_back(size_key("hidden_dim", &models::ModelSpec::hidden_dim));
    k.push_back(size_key("n_classes", &models::ModelSpec::n_classes));
    k.push_back({"model", "init_scale", [](const Cfg& c) { return format_double(c.model.init_scale); },
                 [](Cfg& c, const std::string& v) { c.model.init_scale = parse_double("init_scale", v); }});

    k.push_back(double_key("macfl", "rho", &Cfg::rho));
    k.push_back(double_key("macfl", "sigma1", &Cfg::sigma1));
    k.push_back(double_key("macfl", "sigma2", &Cfg::sigma2));
    k.push_back(int_key("macfl", "attention_sign", &Cfg::attention_sign));
    k.push_back({"macfl", "cosine", [](const Cfg& c) { return quote(to_string(c.cosine)); },
                 [](Cfg& c, const std::string& v) {
                   c.cosine = parse_enum("cosine", v, {CosineForm::standard, CosineForm::squared_norms});
                 }});

    k.push_back(string_key("output", "out_dir", &Cfg::out_dir));
    k.push_back(string_key("output", "label", &Cfg::label));
    k.push_back(string_key("output", "recipe", &Cfg::recipe));
    k.push_back(bool_key("output", "write_json", &Cfg::write_json));
    k.push_back(bool_key("output", "record_wall_time", &Cfg::record_wall_time));

    k.push_back(double_key("bounds", "L", &Cfg::bound_L));
    k.push_back(double_key("bounds", "sigma", &Cfg::bound_sigma));
    k.push_back(double_key("bounds", "G", &Cfg::bound_G));
    k.push_back(double_key("bounds", "eps_c", &Cfg::bound_eps_c));
    k.push_back(double_key("bounds", "eps_g", &Cfg::bound_eps_g));
    k.push_back(double_key("bounds", "f0_gap", &Cfg::bound_f0_gap));
    k.push_back(double_key("bounds", "sigma_M", &Cfg::bound_sigma_M));
    k.push_back(double_key("bounds", "eps_Mc", &Cfg::bound_eps_Mc));
    k.push_back(double_key("bounds", "eps_Mg", &Cfg::bound_eps_Mg));
    k.push_back(list_key("bounds", "alpha_user", &Cfg::alpha_user));
    k.push_back(list_key("bounds", "alpha_user_cluster", &Cfg::alpha_user_cluster));
    k.push_back(list_key("bounds", "alpha_cluster", &Cfg::alpha_cluster));
    k.push_back(list_key("bounds", "beta_user", &Cfg::beta_user));
    k.push_back(list_key("bounds", "beta_user_cluster", &Cfg::beta_user_cluster));

    k.push_back(int_key("estimate", "probes", &Cfg::estimate_probes));
    k.push_back(int_key("estimate", "probe_steps", &Cfg::estimate_probe_steps));
    k.push_back(int_key("estimate", "batch_budget", &Cfg::estimate_batch_budget));
    return k;
  }();
  return table;
}

const Key& find_key(const std::string& key) {
  const auto dot = key.find('.');
  const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
  const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
  for (const auto& k : keys())
    if (k.name == name && (sec.empty() || sec == k.section)) return k;
  throw ConfigError("unknown key '" + key + "'");
}

void range(bool ok, const std::string& field, const std::string& bound) {
  if (!ok) throw ConfigError(field + ": " + bound);
}

// Splits config text into (section, key, value, line) entries.
struct Entry {
  std::string section, key, value;
  int line;
};

std::vector<Entry> tokenize(const std::string& text, const std::string& origin) {
  std::vector<Entry> out;
  std::stringstream ss(text);
  std::string raw, section;
  int line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    bool in_quote = false;
    std::string s;
    for (char ch : raw) {
      if (ch == '"') in_quote = !in_quote;
      if (ch == '#' && !in_quote) break;
      s += ch;
    }
    s = trim(s);
    if (s.empty()) continue;
    if (s.front() == '[' && s.back() == ']' && s.find('=') == std::string::npos) {
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line) + ": expected 'key = value'");
    out.push_back({section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line});
  }
  return out;
}

ExperimentConfig apply_entries(const std::vector<Entry>& entries, const std::string& origin) {
  ExperimentConfig cfg;
  for (const auto& e : entries) {
    const Key* k = nullptr;
    for (const auto& cand : keys())
      if (cand.name == e.key && cand.section == e.section) k = &cand;
    if (!k) {
      const std::string where = e.section.empty() ? e.key : e.section + "." + e.key;
      throw ConfigError(origin + ":" + std::to_string(e.line) + ": unknown key '" + where + "'");
    }
    k->set(cfg, e.value);
  }
  validate(cfg);
  return cfg;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void validate(const ExperimentConfig& c) {
  range(c.n_users >= 1, "n_users", "must be >= 1");
  range(c.n_clusters >= 1, "n_clusters", "must be >= 1");
  range(c.kappa1 >= 1, "kappa1", "must be >= 1");
  range(c.kappa2 >= 1, "kappa2", "must be >= 1");
  range(c.total_iterations >= 1, "total_iterations", "must be >= 1");
  range(c.cloud_rounds >= 0, "cloud_rounds", "must be >= 0");
  range(c.resolved_cloud_rounds() >= 1, "total_iterations", "must be >= kappa1 * kappa2");
  range(std::isfinite(c.eta) && c.eta > 0.0, "eta", "must be finite and > 0");
  range(c.batch_size >= 1, "batch_size", "must be >= 1");
  range(c.eval_every >= 1, "eval_every", "must be >= 1");

  range(c.topology == "linear" || c.topology == "custom", "topology", "must be linear or custom");
  if (c.topology == "custom")
    range(c.adjacency.size() == static_cast<std::size_t>(c.n_clusters), "adjacency",
          "must be n_clusters x n_clusters");
  range(c.p_s >= 0.0 && c.p_s <= 1.0, "p_s", "must lie in [0, 1]");
  if (!c.stay_probs.empty())
    range(c.stay_probs.size() == static_cast<std::size_t>(c.n_clusters), "stay_probs",
          "must have n_clusters entries");
  for (double p : c.stay_probs) range(p >= 0.0 && p <= 1.0, "stay_probs", "entries must lie in [0, 1]");

  range(c.source == "idx" || c.source == "synthetic", "source", "must be idx or synthetic");
  range(c.partition == "iid" || c.partition == "pathological", "partition",
        "must be iid or pathological");
  range(c.shard_size >= 1, "shard_size", "must be >= 1");
  range(c.classes_per_user >= 1, "classes_per_user", "must be >= 1");
  range(c.test_limit >= 0, "test_limit", "must be >= 0");
  range(c.loss_sample_cap >= 0, "loss_sample_cap", "must be >= 0");
  range(c.synth_classes >= 2, "synth_classes", "must be >= 2");
  range(c.synth_train_n >= c.synth_classes, "synth_train_n", "must be >= synth_classes");
  range(c.synth_test_n >= 1, "synth_test_n", "must be >= 1");
  range(c.synth_dim >= c.synth_classes, "synth_dim", "must be >= synth_classes");
  range(c.synth_separation > 0.0, "synth_separation", "must be > 0");

  try {
    c.model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  range(std::isfinite(c.model.init_scale) && c.model.init_scale >= 0.0, "init_scale", "must be >= 0");

  range(c.rho >= 0.0 && std::isfinite(c.rho), "rho", "must be finite and >= 0");
  range(std::isfinite(c.sigma1), "sigma1", "must be finite");
  range(std::isfinite(c.sigma2), "sigma2", "must be finite");
  range(c.attention_sign == 1 || c.attention_sign == -1, "attention_sign", "must be -1 or 1");

  range(c.bound_L > 0.0, "L", "must be > 0");
  for (auto [v, n] : {std::pair{c.bound_sigma, "sigma"}, {c.bound_G, "G"}, {c.bound_eps_c, "eps_c"},
                      {c.bound_eps_g, "eps_g"}, {c.bound_f0_gap, "f0_gap"}, {c.bound_sigma_M, "sigma_M"},
                      {c.bound_eps_Mc, "eps_Mc"}, {c.bound_eps_Mg, "eps_Mg"}})
    range(std::isfinite(v) && v >= 0.0, n, "must be finite and >= 0");

  range(c.estimate_probes >= 1, "probes", "must be >= 1");
  range(c.estimate_probe_steps >= 0, "probe_steps", "must be >= 0");
  range(c.estimate_batch_budget >= 1, "batch_budget", "must be >= 1");
}

std::vector<std::string> config_warnings(const ExperimentConfig& c) {
  std::vector<std::string> w;
  if (c.n_users < c.n_clusters)
    w.push_back("n_users < n_clusters: some clusters start empty");
  if (c.total_iterations % (c.kappa1 * c.kappa2) != 0 && c.cloud_rounds == 0)
    w.push_back("total_iterations is not a multiple of kappa1 * kappa2; the remainder is dropped");
  return w;
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  return apply_entries(tokenize(text, origin), origin);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  return parse_config_text(read_file(path), path.string());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& k : keys()) {
    if (k.section != section) {
      if (!section.empty()) out += "\n";
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, value);
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) {
  return find_key(key).get(cfg);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.section + "." + k.name);
  return out;
}

SweepSpec parse_sweep_text(const std::string& text, const std::string& origin) {
  auto entries = tokenize(text, origin);
  std::vector<Entry> base;
  SweepSpec spec;
  std::string param[2];
  std::vector<std::string> values[2];
  bool has_values[2] = {false, false};
  for (const auto& e : entries) {
    if (e.section != "sweep") {
      base.push_back(e);
      continue;
    }
    if (e.key == "param1") param[0] = unquote(e.value);
    else if (e.key == "param2") param[1] = unquote(e.value);
    else if (e.key == "values1" || e.key == "values2") {
      const int i = e.key == "values1" ? 0 : 1;
      values[i] = split_list(e.value);
      has_values[i] = true;
    } else if (e.key == "seeds") {
      for (const auto& s : split_list(e.value)) spec.seeds.push_back(static_cast<std::uint64_t>(parse_int("seeds", s)));
    } else {
      throw ConfigError(origin + ":" + std::to_string(e.line) + ": unknown key 'sweep." + e.key + "'");
    }
  }
  spec.base = apply_entries(base, origin);
  for (int i = 0; i < 2; ++i) {
    if (param[i].empty()) {
      if (has_values[i]) throw ConfigError("sweep: values" + std::to_string(i + 1) + " without param" + std::to_string(i + 1));
      continue;
    }
    find_key(param[i]);
    for (auto& v : values[i]) v = unquote(v);
    spec.axes.push_back({param[i], values[i]});
  }
  if (spec.seeds.empty()) spec.seeds.push_back(spec.base.seed);
  return spec;
}

SweepSpec parse_sweep(const std::filesystem::path& path) {
  return parse_sweep_text(read_file(path), path.string());
}

}  // namespace macfl::harness
