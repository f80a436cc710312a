#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "macfl/errors.hpp"
#include "macfl/harness.hpp"

using namespace macfl;
using namespace macfl::harness;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
[experiment]
algorithm = "hfl"
seed = 3
n_users = 6
n_clusters = 3
kappa1 = 5
total_iterations = 40
eta = 0.05
[mobility]
p_s = 0.5
[data]
source = "synthetic"
shard_size = 50
synth_train_n = 300
synth_test_n = 120
synth_dim = 8
synth_classes = 3
[model]
kind = "softmax"
input_dim = 8
n_classes = 3
)";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "macfl_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(MACFL_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig small() { return parse_config_text(kSmall); }

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("empty text gives the defaults") {
    const auto c = parse_config_text("");
    CHECK(c == ExperimentConfig{});
    CHECK(c.n_users == 50);
    CHECK(c.kappa1 == 20);
    CHECK(c.eta == 0.001);
  }
  SUBCASE("values, comments and qualified keys") {
    const auto c = parse_config_text("[mobility]\np_s = 0.25  # note\nadjacency = [[1,1],[1,1]]\n[experiment]\nn_clusters = 2\n");
    CHECK(c.p_s == 0.25);
    CHECK(c.adjacency == std::vector<std::vector<int>>{{1, 1}, {1, 1}});
    CHECK(get_config_value(c, "mobility.p_s") == "0.25");
    auto d = c;
    set_config_value(d, "kappa2", "3");
    CHECK(d.kappa2 == 3);
  }
  SUBCASE("errors name the field") {
    try {
      validate(parse_config_text("[mobility]\np_s = 1.5\n"));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("p_s") != std::string::npos);
    }
    try {
      parse_config_text("[mobility]\nspeed = 3\n", "x.ini");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("mobility.speed") != std::string::npos);
      CHECK(std::string(e.what()).find("x.ini:2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_text("[experiment]\nn_users = many\n"), ConfigError);
    CHECK_THROWS_AS(validate(parse_config_text("[experiment]\neta = -1\n")), ConfigError);
  }
  SUBCASE("property: serialize then parse is the identity") {
    auto c = small();
    c.algorithm = Algorithm::macfl;
    c.stay_probs = {0.1, 0.2, 0.3};
    c.label = "with \"quotes\"";
    c.alpha_user = {0.5, 0.5};
    c.eta = 0.1 + 0.2;
    CHECK(parse_config_text(serialize_config(c)) == c);
    for (const auto& key : config_keys()) {
      auto d = c;
      set_config_value(d, key, get_config_value(c, key));
      CHECK(d == c);
    }
  }
  SUBCASE("warnings") {
    auto c = small();
    c.n_users = 2;
    CHECK_FALSE(config_warnings(c).empty());
  }
}

TEST_CASE("runs write identical traces") {
  const auto dir = scratch("run");
  auto cfg = small();
  cfg.out_dir = dir.string();
  const auto a = run(cfg);
  const auto first = slurp(a.csv);
  const auto b = run(cfg);
  CHECK(slurp(b.csv) == first);
  REQUIRE(a.json);
  const auto j = nlohmann::json::parse(slurp(*a.json));
  CHECK(j["config"]["experiment"]["n_users"] == 6);
  CHECK(a.csv.filename() == "hfl_seed3.csv");

  const auto back = read_trace_csv(a.csv);
  CHECK(back.config == cfg);
  REQUIRE(back.records.size() == a.trace.records.size());
  CHECK(back.records.back().global_accuracy == a.trace.records.back().global_accuracy);
  CHECK(first.find("round,t,algorithm,global_loss,global_accuracy,mean_cluster_accuracy,participants") !=
        std::string::npos);
}

TEST_CASE("participants column") {
  auto cfg = small();
  cfg.p_s = 0.0;
  const auto d = load_data(cfg);
  for (const auto& r : fed::run_experiment(cfg, d).records) CHECK(r.participants == 0);
  cfg.algorithm = Algorithm::macfl;
  for (const auto& r : fed::run_experiment(cfg, d).records) CHECK(r.participants == 6);
}

TEST_CASE("sweeps") {
  const auto dir = scratch("sweep");
  SUBCASE("grid of three stay probabilities and two seeds") {
    std::string text = kSmall;
    text += "[output]\nout_dir = \"" + dir.string() + "\"\nrecipe = \"ps\"\n[sweep]\nparam1 = p_s\nvalues1 = [0.0, 0.5, 1.0]\nseeds = [1, 2]\n";
    const auto spec = parse_sweep_text(text);
    const auto r = run_sweep(spec);
    CHECK(r.cells.size() == 6);
    int csv = 0;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".csv" && e.path().filename().string().rfind("hfl_ps", 0) == 0) ++csv;
    CHECK(csv == 6);
    CHECK(fs::exists(dir / "hfl_ps0.5_seed2.csv"));
    REQUIRE(r.summary.size() == 3);
    for (const auto& row : r.summary) {
      double mean = 0.0;
      int n = 0;
      for (const auto& c : r.cells)
        if (c.series == row.series) mean += c.trace->records.back().global_accuracy, ++n;
      CHECK(row.seeds == 2);
      CHECK(row.mean_final_accuracy == doctest::Approx(mean / n).epsilon(1e-12));
    }
    CHECK(fs::exists(dir / "summary.csv"));
    CHECK(fs::exists(dir / "plotdata_ps.csv"));
    const auto plot = slurp(dir / "plotdata_ps.csv");
    CHECK(plot.rfind("series,x,y\n", 0) == 0);
  }
  SUBCASE("empty grid produces no cells") {
    std::string text = kSmall;
    text += "[output]\nout_dir = \"" + dir.string() + "\"\n[sweep]\nparam1 = p_s\nvalues1 = []\n";
    const auto r = run_sweep(parse_sweep_text(text));
    CHECK(r.cells.empty());
    CHECK(slurp(dir / "summary.csv") == "series,seeds,failed,mean_final_accuracy,std_final_accuracy\n");
  }
  SUBCASE("an invalid cell is recorded and the rest run") {
    std::string text = kSmall;
    text += "[sweep]\nparam1 = p_s\nvalues1 = [0.5, 2.0]\n";
    const auto r = run_sweep(parse_sweep_text(text), false);
    REQUIRE(r.cells.size() == 2);
    CHECK(r.cells[0].error.empty());
    CHECK_FALSE(r.cells[1].error.empty());
  }
}

TEST_CASE("series labels") {
  const auto c = small();
  CHECK(series_label(c, {{"p_s", {}}}, {"0.50"}) == "hfl_ps0.5");
  CHECK(series_label(c, {{"experiment.kappa1", {}}, {"kappa2", {}}}, {"10", "2"}) == "hfl_k110_k22");
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1e-20) == "1e-20");
}

TEST_CASE("plot data averages traces per iteration") {
  const auto dir = scratch("plot");
  auto cfg = small();
  cfg.recipe = "demo";
  fed::MetricsTrace a, b;
  a.config = b.config = cfg;
  a.records = {{1, 5, 0, 0.2}, {2, 10, 0, 0.4}};
  b.records = {{1, 5, 0, 0.4}, {2, 10, 0, 0.8}};
  const auto files = emit_plotdata({a, b}, dir);
  REQUIRE(files.size() == 1);
  CHECK(slurp(files[0]) == "series,x,y\nhfl,5,0.30000000000000004\nhfl,10,0.6000000000000001\n");
  CHECK_THROWS_AS(emit_plotdata({}, dir), InvalidArgument);
}

TEST_CASE("data paths and loading") {
  setenv(kDataRootEnv, (fs::path(MACFL_SOURCE_DIR) / "data" / "mnist-subset").c_str(), 1);
  ExperimentConfig cfg;
  cfg.n_users = 10;
  cfg.test_limit = 500;
  const auto d = load_data(cfg);
  CHECK(d.train->n == 8000);
  CHECK(d.test->n == 500);
  CHECK(d.shards.size() == 10);
  cfg.train_images = "does-not-exist";
  CHECK_THROWS_AS(load_data(cfg), IoError);
  cfg = ExperimentConfig{};
  cfg.model.input_dim = 50;
  CHECK_THROWS_AS(load_data(cfg), ConfigError);
}

TEST_CASE("bound inputs follow the config") {
  auto cfg = small();
  cfg.bound_sigma = 2.0;
  const auto in = bound_inputs(cfg);
  CHECK(in.T == cfg.resolved_cloud_rounds());
  CHECK(in.sigma == 2.0);
  CHECK(in.M == 6);
}

TEST_CASE("command line") {
  const auto dir = scratch("cli");
  auto cfg = small();
  cfg.out_dir = (dir / "out").string();
  write_atomic(dir / "ok.ini", serialize_config(cfg));
  cfg.p_s = 0.0;
  write_atomic(dir / "stuck.ini", serialize_config(cfg));
  write_atomic(dir / "bad.ini", "[mobility]\np_s = 7\n");

  CHECK(cli("run " + (dir / "ok.ini").string()) == 0);
  CHECK(fs::exists(dir / "out" / "hfl_seed3.csv"));
  CHECK(cli("run " + (dir / "ok.ini").string() + " --execution serial") == 0);
  CHECK(cli("run " + (dir / "bad.ini").string()) == 1);
  CHECK(cli("run " + (dir / "missing.ini").string()) == 1);
  CHECK(cli("bounds " + (dir / "ok.ini").string()) == 0);
  CHECK(cli("bounds " + (dir / "stuck.ini").string()) == 2);
  CHECK(cli("plotdata " + (dir / "out").string()) == 0);
  CHECK(cli("frobnicate") == 1);
  CHECK(cli("--help") == 0);
}
