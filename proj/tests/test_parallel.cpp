#include <doctest.h>

#include <omp.h>

#include <filesystem>

#include "macfl/harness.hpp"
#include "macfl/models.hpp"

using namespace macfl;
namespace fs = std::filesystem;

// Runs with several threads even on a single-core machine, so the OpenMP
// paths really interleave.
struct Threads {
  int saved = omp_get_max_threads();
  Threads() { omp_set_num_threads(4); }
  ~Threads() { omp_set_num_threads(saved); }
};

TEST_CASE("evaluation is identical serially and in parallel") {
  Threads t;
  const auto root = fs::path(MACFL_SOURCE_DIR) / "data" / "mnist-subset";
  const auto test = data::load_idx(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz");
  for (auto kind : {models::ModelKind::softmax, models::ModelKind::mlp}) {
    const models::ModelSpec spec{kind, 784, 32, 10, 0.05};
    auto rng = make_rng(5, Stream::init_params);
    const auto w = models::init_params(spec, rng);
    const auto a = models::evaluate_full(spec, w.span(), test.view(), Execution::serial);
    const auto b = models::evaluate_full(spec, w.span(), test.view(), Execution::parallel);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.mean_loss == b.mean_loss);
  }
}

TEST_CASE("experiments are identical serially and in parallel") {
  Threads t;
  for (auto alg : {Algorithm::hfl, Algorithm::macfl}) {
    ExperimentConfig cfg;
    cfg.algorithm = alg;
    cfg.n_users = 8;
    cfg.n_clusters = 3;
    cfg.kappa1 = 4;
    cfg.kappa2 = 2;
    cfg.total_iterations = 48;
    cfg.eta = 0.05;
    cfg.source = "synthetic";
    cfg.shard_size = 40;
    cfg.synth_train_n = 320;
    cfg.synth_test_n = 200;
    cfg.synth_dim = 12;
    cfg.synth_classes = 4;
    cfg.model = {models::ModelKind::mlp, 12, 8, 4, 0.1};
    const auto d = harness::load_data(cfg);
    cfg.execution = Execution::serial;
    const auto s = fed::run_experiment(cfg, d);
    cfg.execution = Execution::parallel;
    const auto p = fed::run_experiment(cfg, d);
    CHECK(s.final_global == p.final_global);
    REQUIRE(s.records.size() == p.records.size());
    for (std::size_t k = 0; k < s.records.size(); ++k) {
      CHECK(s.records[k].global_loss == p.records[k].global_loss);
      CHECK(s.records[k].cluster_accuracy == p.records[k].cluster_accuracy);
    }

    // Estimates do not depend on the thread count either.
    const auto e4 = harness::estimate(cfg, d);
    omp_set_num_threads(1);
    const auto e1 = harness::estimate(cfg, d);
    omp_set_num_threads(4);
    CHECK(e4.sigma == e1.sigma);
    CHECK(e4.L == e1.L);
    CHECK(e4.eps_c == e1.eps_c);
  }
}
