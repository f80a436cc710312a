// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// MNIST-based checks read the subset from $MACFL_DATA_ROOT.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "macfl/analysis.hpp"
#include "macfl/errors.hpp"
#include "macfl/fedcore.hpp"
#include "macfl/harness.hpp"
#include "macfl/mobility.hpp"
#include "macfl/models.hpp"

using namespace macfl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

ExperimentConfig mnist_base() {
  ExperimentConfig cfg;
  cfg.eta = 0.001;
  cfg.kappa1 = 20;
  cfg.kappa2 = 1;
  cfg.total_iterations = 2000;
  cfg.eval_every = 1000;
  cfg.eval_clusters = false;
  cfg.write_json = false;
  return cfg;
}

// Mean final test accuracy per series of a sweep, in grid order.
std::map<std::string, double> sweep_means(const ExperimentConfig& base, std::vector<harness::SweepAxis> axes,
                                          std::vector<std::uint64_t> seeds, std::string& failure) {
  harness::SweepSpec spec{base, std::move(axes), std::move(seeds)};
  const auto r = harness::run_sweep(spec, false);
  std::map<std::string, double> out;
  for (const auto& c : r.cells)
    if (!c.error.empty()) failure = c.series + ": " + c.error;
  for (const auto& row : r.summary) out[row.series] = row.mean_final_accuracy;
  return out;
}

Outcome stuck_at_init() {
  ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.n_users = 10;
  cfg.n_clusters = 5;
  cfg.total_iterations = 400;
  cfg.eta = 0.05;
  cfg.p_s = 0.0;
  cfg.source = "synthetic";
  cfg.shard_size = 200;
  cfg.synth_train_n = 2000;
  cfg.synth_test_n = 1000;
  cfg.model = {models::ModelKind::softmax, 50, 64, 10, 0.01};
  const auto d = harness::load_data(cfg);
  bool unchanged = true;
  const auto trace = fed::run_experiment(cfg, d, [&](const fed::EdgeRoundEvent& e) {
    unchanged = unchanged && e.global_after == e.global_before;
  });
  unchanged = unchanged && trace.final_global == trace.initial_global;
  const double acc0 = models::evaluate(cfg.model, trace.initial_global.span(), *d.test);
  bool constant = true;
  for (const auto& r : trace.records) constant = constant && r.global_accuracy == acc0;
  const bool chance = std::abs(acc0 - 0.1) <= 0.05;
  return {unchanged && constant && chance,
          std::string(unchanged ? "global unchanged" : "global moved") + ", accuracy " + fmt("%.4f", acc0) +
              (constant ? " every round" : " drifted")};
}

Outcome mobility_immunity() {
  auto base = mnist_base();
  base.algorithm = Algorithm::macfl;
  base.n_users = 10;
  base.shard_size = 600;
  std::string err;
  const auto m = sweep_means(base, {{"p_s", {"0", "0.5", "1"}}}, {1, 2, 3}, err);
  if (!err.empty()) return {false, err};
  double lo = 1.0, hi = 0.0;
  std::string detail;
  for (const auto& [series, acc] : m) {
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
    detail += series + "=" + fmt("%.4f", acc) + " ";
  }
  return {hi - lo <= 0.03, detail + "spread " + fmt("%.4f", hi - lo)};
}

ExperimentConfig non_iid_base() {
  auto base = mnist_base();
  base.n_users = 20;
  base.n_clusters = 5;
  base.partition = "pathological";
  base.shard_size = 300;
  base.p_s = 0.5;
  return base;
}

Outcome macfl_beats_hfl() {
  std::string err;
  const auto m = sweep_means(non_iid_base(), {{"algorithm", {"hfl", "macfl"}}}, {1, 2, 3}, err);
  if (!err.empty()) return {false, err};
  const double gap = m.at("macfl") - m.at("hfl");
  return {gap >= 0.02, "hfl=" + fmt("%.4f", m.at("hfl")) + " macfl=" + fmt("%.4f", m.at("macfl")) +
                           " gap " + fmt("%.4f", gap)};
}

Outcome aggregation_frequency() {
  std::string err;
  auto base = non_iid_base();
  const auto a = sweep_means(base, {{"kappa1", {"10", "20"}}}, {1, 2, 3}, err);
  base.kappa1 = 20;
  base.kappa2 = 2;
  const auto b = sweep_means(base, {{"kappa2", {"2"}}}, {1, 2, 3}, err);
  if (!err.empty()) return {false, err};
  const double k10 = a.at("hfl_k110"), k20 = a.at("hfl_k120"), k20x2 = b.at("hfl_k22");
  const bool order = k10 - k20 >= -0.01 && k20 - k20x2 >= -0.01;

  analysis::BoundInputs in;
  const std::vector<double> k1{1, 2, 5, 10, 20}, k2{1, 2, 3, 4};
  bool mono = true;
  for (const analysis::BoundFn& fn : {analysis::BoundFn(analysis::hfl_bound), analysis::BoundFn(analysis::macfl_bound)}) {
    mono = mono && analysis::monotonicity_scan(fn, in, analysis::ScanParameter::kappa1, k1).nondecreasing;
    mono = mono && analysis::monotonicity_scan(fn, in, analysis::ScanParameter::kappa2, k2).nondecreasing;
  }
  return {order && mono, "(10,1)=" + fmt("%.4f", k10) + " (20,1)=" + fmt("%.4f", k20) + " (20,2)=" +
                             fmt("%.4f", k20x2) + (mono ? ", bound monotone" : ", bound not monotone")};
}

Outcome more_users() {
  auto base = mnist_base();
  base.shard_size = 160;
  base.p_s = 0.5;
  std::string err;
  const auto m = sweep_means(base, {{"n_users", {"5", "20", "50"}}}, {1, 2, 3}, err);
  if (!err.empty()) return {false, err};
  const double a = m.at("hfl_M5"), b = m.at("hfl_M20"), c = m.at("hfl_M50");
  return {b - a >= -0.01 && c - b >= -0.01,
          "M5=" + fmt("%.4f", a) + " M20=" + fmt("%.4f", b) + " M50=" + fmt("%.4f", c)};
}

Outcome reductions() {
  auto cfg = mnist_base();
  cfg.n_users = 4;
  cfg.n_clusters = 1;
  cfg.p_s = 1.0;
  cfg.total_iterations = 400;
  cfg.shard_size = 300;
  cfg.eta = 0.01;
  const auto d = harness::load_data(cfg);
  const auto grad = models::gradient_fn(cfg.model);
  auto init = [&] {
    auto rng = make_rng(cfg.seed, Stream::init_params);
    return models::init_params(cfg.model, rng);
  };
  auto samplers = [&](const fed::ExperimentData& d, int users) {
    std::vector<fed::BatchSampler> s;
    for (int m = 0; m < users; ++m)
      s.emplace_back(*d.train, d.shards[static_cast<std::size_t>(m)], static_cast<std::size_t>(cfg.batch_size),
                     fed::user_batch_rng(cfg.seed, m), fed::user_inner_rng(cfg.seed, m));
    return s;
  };

  // FedAvg: every user trains kappa1 steps from the global model, then the
  // global model becomes the plain average, kept inside the inputs' range.
  auto s = samplers(d, cfg.n_users);
  auto w = init();
  for (int b = 0; b < cfg.edge_rounds(); ++b) {
    std::vector<models::ParamVector> local;
    for (auto& x : s) local.push_back(fed::local_update(grad, w, x, cfg.eta, cfg.kappa1).params);
    const double a = 1.0 / static_cast<double>(local.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      double acc = a * local[0][i], lo = local[0][i], hi = local[0][i];
      for (std::size_t m = 1; m < local.size(); ++m) {
        acc += a * local[m][i];
        lo = std::min(lo, local[m][i]);
        hi = std::max(hi, local[m][i]);
      }
      w[i] = std::clamp(acc, lo, hi);
    }
  }
  const bool fedavg = fed::run_experiment(cfg, d).final_global == w;

  auto one = cfg;
  one.n_users = 1;
  const auto d1 = harness::load_data(one);
  auto s1 = samplers(d1, 1);
  auto sgd = fed::local_update(grad, init(), s1[0], one.eta, one.kappa1 * one.edge_rounds()).params;
  const bool plain = fed::run_experiment(one, d1).final_global == sgd;
  return {fedavg && plain, std::string("fedavg ") + (fedavg ? "bitwise equal" : "differs") + ", sgd " +
                               (plain ? "bitwise equal" : "differs")};
}

long double rel(long double a, long double b) { return std::fabs(a - b) / std::fabs(b); }

Outcome bounds_check() {
  analysis::BoundInputs in;
  in.eta = 0.001;
  in.p_s = 0.5;
  in.T = 100;
  long double worst = 0.0L;
  worst = std::max(worst, rel(analysis::hfl_bound(in).value, 40.08019546341953957083302L));
  worst = std::max(worst, rel(analysis::macfl_bound(in).value, 20.00020186588227995988462L));
  auto cap = in;
  cap.p_s = 1.0;
  cap.kappa2 = 2;
  cap.eta = 0.99 * analysis::eta_cap(1.0, 20, 2);
  worst = std::max(worst, rel(analysis::hfl_bound(cap).value, 4.278412025302441785148738L));
  worst = std::max(worst, rel(analysis::macfl_bound(cap).value, 3.498914475964307689390967L));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  long double corollary = 0.0L;
  for (int k = 0; k < 500; ++k) {
    analysis::BoundInputs r;
    r.N = 1 + rng() % 10;
    r.M = r.N * (1 + rng() % 10);
    r.kappa1 = 1 + static_cast<int>(rng() % 40);
    r.kappa2 = 1 + static_cast<int>(rng() % 5);
    r.p_s = 0.01 + 0.99 * u(rng);
    r.eta = (0.01 + 0.98 * u(rng)) * analysis::eta_cap(r.L, r.kappa1, r.kappa2);
    analysis::set_uniform_weights(r);
    corollary = std::max(corollary, rel(analysis::hfl_bound(r).value, analysis::corollary_bound(r).value));
  }

  bool rejected = false;
  auto over = in;
  over.eta = analysis::eta_cap(in.L, in.kappa1, in.kappa2);
  try {
    analysis::hfl_bound(over);
  } catch (const InvalidArgument&) {
    rejected = true;
  }
  return {worst <= 1e-10L && corollary <= 1e-12L && rejected,
          "golden rel " + fmt("%.2e", static_cast<double>(worst)) + ", corollary rel " +
              fmt("%.2e", static_cast<double>(corollary)) + (rejected ? ", cap enforced" : ", cap ignored")};
}

double fd_error(const models::ModelSpec& spec, std::vector<double> w, const data::BatchView& b) {
  const auto g = models::gradient(spec, w, b).values;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + 1e-6;
    const double up = models::loss(spec, w, b);
    w[i] = keep - 1e-6;
    const double down = models::loss(spec, w, b);
    w[i] = keep;
    const double num = (up - down) / 2e-6;
    worst = std::max(worst, std::abs(g[i] - num) / std::max({std::abs(g[i]), std::abs(num), 1e-3}));
  }
  return worst;
}

Outcome numerical_integrity() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  double fd = 0.0;
  for (int draw = 0; draw < 50; ++draw) {
    for (const models::ModelSpec& spec : {models::ModelSpec{models::ModelKind::softmax, 6, 0, 4, 0.1},
                                          models::ModelSpec{models::ModelKind::mlp, 6, 5, 4, 0.1}}) {
      data::LabeledDataset ds;
      ds.n = 8;
      ds.dim = 6;
      ds.n_classes = 4;
      for (int i = 0; i < 48; ++i) ds.features.push_back(normal(rng));
      for (int i = 0; i < 8; ++i) ds.labels.push_back(static_cast<int>(rng() % 4));
      std::vector<double> w(spec.param_count());
      for (auto& x : w) x = 0.5 * normal(rng);
      fd = std::max(fd, fd_error(spec, w, ds.view()));
    }
  }

  const auto P = mobility::build_transition_matrix(mobility::build_linear_topology(5), 0.5);
  const std::size_t users = 20000, steps = 6;
  std::vector<mobility::UserState> states(users);
  for (std::size_t m = 0; m < users; ++m) states[m] = {static_cast<int>(m), 0};
  auto mrng = make_rng(3, Stream::mobility);
  for (std::size_t s = 0; s < steps; ++s) states = mobility::step_users(states, P, mrng);
  std::vector<double> empirical(5, 0.0);
  for (const auto& s : states) empirical[static_cast<std::size_t>(s.cluster)] += 1.0 / users;
  const std::vector<mobility::TransitionMatrix> seq(steps, P);
  const auto exact = mobility::propagate_marginal(std::vector<double>{1, 0, 0, 0, 0}, seq);
  double linf = 0.0;
  for (std::size_t i = 0; i < 5; ++i) linf = std::max(linf, std::abs(exact[i] - empirical[i]));

  double simplex = 0.0;
  bool uniform = true;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<models::ParamVector> cands(1 + rng() % 8, models::ParamVector(10));
    for (auto& c : cands)
      for (auto& v : c.values) v = normal(rng);
    models::ParamVector anchor(10);
    for (auto& v : anchor.values) v = normal(rng);
    double s = 0.0;
    for (double b : fed::attention_weights(cands, anchor, 25.0)) s += b;
    simplex = std::max(simplex, std::abs(s - 1.0));
    for (double b : fed::attention_weights(cands, anchor, 0.0))
      uniform = uniform && b == 1.0 / static_cast<double>(cands.size());
  }
  return {fd <= 1e-5 && linf <= 0.02 && simplex <= 1e-12 && uniform,
          "fd " + fmt("%.2e", fd) + ", markov " + fmt("%.4f", linf) + ", attention " + fmt("%.1e", simplex) +
              (uniform ? ", uniform at sigma 0" : ", not uniform at sigma 0")};
}

Outcome telescoping() {
  ExperimentConfig cfg;
  cfg.n_users = 4;
  cfg.n_clusters = 2;
  cfg.kappa1 = 2;
  cfg.kappa2 = 2;
  cfg.cloud_rounds = 10;
  cfg.eta = 0.05;
  cfg.p_s = 0.6;
  cfg.source = "synthetic";
  cfg.shard_size = 50;
  cfg.synth_train_n = 200;
  cfg.synth_test_n = 100;
  cfg.model = {models::ModelKind::softmax, 50, 0, 10, 0.1};
  const auto d = harness::load_data(cfg);
  auto rng = make_rng(cfg.seed, Stream::init_params);
  const auto w0 = models::init_params(cfg.model, rng);
  std::vector<models::ParamVector> clusters(2, w0);
  double worst = 0.0;
  int rounds = 0;
  fed::run_experiment(cfg, d, [&](const fed::EdgeRoundEvent& e) {
    ++rounds;
    for (std::size_t n = 0; n < 2; ++n) {
      std::vector<std::vector<double>> sums;
      std::vector<bool> flags;
      std::vector<double> w;
      for (std::size_t m = 0; m < 4; ++m) {
        if (static_cast<std::size_t>(e.cluster_at_start[m]) != n) continue;
        sums.push_back(e.grad_sums[m]);
        flags.push_back(e.cluster_at_start[m] == e.cluster_at_end[m]);
        w.push_back(e.user_weight[m]);
      }
      clusters[n] = fed::hfl_edge_update(clusters[n], sums, flags, w, cfg.eta);
    }
    if (e.cloud_round) {
      const auto g = fed::hfl_cloud_update(clusters, e.cluster_weight);
      std::fill(clusters.begin(), clusters.end(), g);
    }
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < w0.size(); ++i)
        worst = std::max(worst, std::abs(clusters[n][i] - e.clusters[n][i]));
  });
  return {worst <= 1e-10 && rounds == 20, fmt("max deviation %.2e", worst) + " over " + std::to_string(rounds) + " rounds"};
}

Outcome divergence_ordering() {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto cfg = non_iid_base();
    cfg.seed = seed;
    const auto skew = harness::estimate(cfg, harness::load_data(cfg));
    cfg.partition = "iid";
    const auto iid = harness::estimate(cfg, harness::load_data(cfg));
    if (skew.eps_c > iid.eps_c && skew.eps_g > iid.eps_g) ++wins;
  }
  return {wins == 10, std::to_string(wins) + "/10 seeds"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"stuck at init when users always move", stuck_at_init},
      {"MACFL insensitive to stay probability", mobility_immunity},
      {"MACFL beats HFL on non-IID data", macfl_beats_hfl},
      {"aggregation frequency ordering", aggregation_frequency},
      {"more users help", more_users},
      {"FedAvg and SGD reductions", reductions},
      {"bound evaluator cross-checks", bounds_check},
      {"numerical integrity", numerical_integrity},
      {"telescoping identity", telescoping},
      {"divergence constant ordering", divergence_ordering},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += o.pass ? 0 : 1;
    std::printf("criterion %zu: %s  %s (%s) [%.1fs]\n", k + 1, o.pass ? "PASS" : "FAIL",
                criteria[k].first.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
