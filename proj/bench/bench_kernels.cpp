// Serial reference vs OpenMP kernels: test-set evaluation and one edge round.
// Arg 0 runs the serial path, 1 the parallel one.

#include <benchmark/benchmark.h>

#include <filesystem>

#include "macfl/fedcore.hpp"
#include "macfl/harness.hpp"

using namespace macfl;

namespace {

const data::LabeledDataset& mnist_test() {
  static const auto ds = [] {
    const auto root = std::filesystem::path(MACFL_SOURCE_DIR) / "data" / "mnist-subset";
    return data::load_idx(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz");
  }();
  return ds;
}

Execution mode(const benchmark::State& s) { return s.range(0) ? Execution::parallel : Execution::serial; }

void BM_Evaluate(benchmark::State& state) {
  const models::ModelSpec spec{state.range(1) ? models::ModelKind::mlp : models::ModelKind::softmax, 784, 64, 10, 0.01};
  auto rng = make_rng(1, Stream::init_params);
  const auto w = models::init_params(spec, rng);
  const auto& test = mnist_test();
  for (auto _ : state) benchmark::DoNotOptimize(models::evaluate_full(spec, w.span(), test.view(), mode(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(test.n));
}
BENCHMARK(BM_Evaluate)->ArgsProduct({{0, 1}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_EdgeRound(benchmark::State& state) {
  ExperimentConfig cfg;
  cfg.algorithm = state.range(1) ? Algorithm::macfl : Algorithm::hfl;
  cfg.n_users = 20;
  cfg.kappa1 = 20;
  cfg.cloud_rounds = 1;
  cfg.eval_clusters = false;
  cfg.test_limit = 200;
  cfg.loss_sample_cap = 200;
  cfg.shard_size = 300;
  cfg.execution = mode(state);
  setenv(harness::kDataRootEnv, (std::filesystem::path(MACFL_SOURCE_DIR) / "data" / "mnist-subset").c_str(), 0);
  const auto d = harness::load_data(cfg);
  for (auto _ : state) benchmark::DoNotOptimize(fed::run_experiment(cfg, d));
}
BENCHMARK(BM_EdgeRound)->ArgsProduct({{0, 1}, {0, 1}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
