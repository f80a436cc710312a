#include "macfl/fedcore.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>

#include "macfl/errors.hpp"
#include "macfl/mobility.hpp"

namespace macfl::fed {

BatchSampler::BatchSampler(const data::LabeledDataset& ds, const data::Shard& shard,
                           std::size_t batch_size, Rng primary, Rng inner)
    : ds_(&ds), shard_(&shard), batch_size_(batch_size), primary_(primary), inner_(inner) {}

data::MiniBatch BatchSampler::next() {
  return data::sample_minibatch(*ds_, *shard_, batch_size_, primary_);
}

data::MiniBatch BatchSampler::next_inner() {
  return data::sample_minibatch(*ds_, *shard_, batch_size_, inner_);
}

namespace {

void apply_step(ParamVector& w, std::vector<double>& grad_sum, const std::vector<double>& g,
                double eta) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] -= eta * g[i];
    grad_sum[i] += g[i];
  }
  if (!w.all_finite()) throw NumericDivergence("non-finite parameters after local update");
}

void check_local_args(double eta, int steps) {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidArgument("eta must be finite and >= 0");
  if (steps < 1) throw InvalidArgument("local update needs at least one step");
}

}  // namespace

LocalResult local_update(const GradientFn& grad, ParamVector start, BatchSampler& sampler,
                         double eta, int steps) {
  check_local_args(eta, steps);
  LocalResult r{std::move(start), {}, 0.0};
  r.grad_sum.assign(r.params.size(), 0.0);
  for (int s = 0; s < steps; ++s) {
    const auto batch = sampler.next();
    const auto g = grad(r.params.span(), batch.view());
    r.last_batch_loss = g.batch_loss;
    apply_step(r.params, r.grad_sum, g.values, eta);
  }
  return r;
}

LocalResult macfl_local_update(const GradientFn& grad, ParamVector start, BatchSampler& sampler,
                               double eta, double rho, int steps) {
  check_local_args(eta, steps);
  if (!(rho >= 0.0)) throw InvalidArgument("rho must be >= 0");
  LocalResult r{std::move(start), {}, 0.0};
  r.grad_sum.assign(r.params.size(), 0.0);
  for (int s = 0; s < steps; ++s) {
    const auto outer = sampler.next();
    models::GradEstimate g;
    if (rho == 0.0) {
      g = grad(r.params.span(), outer.view());
    } else {
      const auto inner = sampler.next_inner();
      g = models::meta_gradient(grad, r.params.span(), inner.view(), outer.view(), rho);
    }
    r.last_batch_loss = g.batch_loss;
    apply_step(r.params, r.grad_sum, g.values, eta);
  }
  return r;
}

void check_simplex(std::span<const double> weights, const std::string& what) {
  if (weights.empty()) throw InvalidArgument(what + ": empty weight vector");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw InvalidArgument(what + ": weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw InvalidArgument(what + ": weights must sum to 1");
}

ParamVector convex_combination(std::span<const ParamVector* const> inputs,
                               std::span<const double> weights) {
  if (inputs.size() != weights.size() || inputs.empty())
    throw InvalidArgument("convex_combination: inputs and weights must be non-empty and aligned");
  std::vector<std::size_t> live;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    if (weights[k] > 0.0) live.push_back(k);
  if (live.empty()) throw InvalidArgument("convex_combination: no positive weight");
  const std::size_t n = inputs[live.front()]->size();
  for (auto k : live)
    if (inputs[k]->size() != n) throw InvalidArgument("convex_combination: length mismatch");

  ParamVector out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double first = (*inputs[live[0]])[i];
    double acc = weights[live[0]] * first;
    double lo = first, hi = first;
    for (std::size_t q = 1; q < live.size(); ++q) {
      const double v = (*inputs[live[q]])[i];
      acc += weights[live[q]] * v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    out[i] = std::clamp(acc, lo, hi);
  }
  return out;
}

ParamVector hfl_edge_update(const ParamVector& cluster, std::span<const std::vector<double>> grad_sums,
                            const std::vector<bool>& indicators, std::span<const double> weights,
                            double eta) {
  if (grad_sums.size() != indicators.size() || grad_sums.size() != weights.size())
    throw InvalidArgument("hfl_edge_update: per-user inputs must have equal length");
  if (grad_sums.empty()) return cluster;
  check_simplex(weights, "hfl_edge_update");
  ParamVector out = cluster;
  for (std::size_t m = 0; m < grad_sums.size(); ++m) {
    if (!indicators[m] || weights[m] == 0.0) continue;
    if (grad_sums[m].size() != cluster.size())
      throw InvalidArgument("hfl_edge_update: gradient length mismatch");
    const double scale = eta * weights[m];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= scale * grad_sums[m][i];
  }
  return out;
}

ParamVector hfl_edge_update_models(const ParamVector& cluster,
                                   std::span<const ParamVector> user_models,
                                   const std::vector<bool>& indicators,
                                   std::span<const double> weights) {
  if (user_models.size() != indicators.size() || user_models.size() != weights.size())
    throw InvalidArgument("hfl_edge_update: per-user inputs must have equal length");
  if (user_models.empty()) return cluster;
  check_simplex(weights, "hfl_edge_update");

  std::vector<const ParamVector*> inputs;
  std::vector<double> w;
  double stale = 0.0;
  for (std::size_t m = 0; m < user_models.size(); ++m) {
    if (indicators[m]) {
      inputs.push_back(&user_models[m]);
      w.push_back(weights[m]);
    } else {
      stale += weights[m];
    }
  }
  if (inputs.empty()) return cluster;
  if (stale > 0.0) {
    inputs.push_back(&cluster);
    w.push_back(stale);
  }
  return convex_combination(inputs, w);
}

ParamVector hfl_cloud_update(std::span<const ParamVector> cluster_params,
                             std::span<const double> alpha_cluster) {
  if (cluster_params.size() != alpha_cluster.size())
    throw InvalidArgument("hfl_cloud_update: one weight per cluster required");
  check_simplex(alpha_cluster, "hfl_cloud_update");
  std::vector<const ParamVector*> inputs;
  for (const auto& c : cluster_params) inputs.push_back(&c);
  return convex_combination(inputs, alpha_cluster);
}

double cosine_similarity(std::span<const double> x, std::span<const double> y, CosineForm form) {
  if (x.size() != y.size()) throw InvalidArgument("cosine_similarity: length mismatch");
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw DegenerateInput("cosine similarity of a zero vector");
  if (form == CosineForm::squared_norms) return dot / (xx * yy);
  return std::clamp(dot / (std::sqrt(xx) * std::sqrt(yy)), -1.0, 1.0);
}

std::vector<double> attention_weights(std::span<const ParamVector> candidates,
                                      const ParamVector& anchor, double sigma,
                                      AttentionOptions opts) {
  if (candidates.empty()) throw InvalidArgument("attention_weights: no candidates");
  if (!std::isfinite(sigma)) throw InvalidArgument("attention_weights: sigma must be finite");
  const std::size_t k = candidates.size();
  if (sigma == 0.0) return std::vector<double>(k, 1.0 / static_cast<double>(k));

  std::vector<double> score(k);
  for (std::size_t i = 0; i < k; ++i)
    score[i] = static_cast<double>(opts.sign) * sigma *
               cosine_similarity(candidates[i].span(), anchor.span(), opts.cosine);
  const double top = *std::max_element(score.begin(), score.end());
  double sum = 0.0;
  for (auto& s : score) sum += s = std::exp(s - top);
  for (auto& s : score) s /= sum;
  return score;
}

namespace {

ParamVector attention_average(const ParamVector& anchor, std::span<const ParamVector> models,
                              double sigma, AttentionOptions opts) {
  if (models.empty()) return anchor;
  const auto beta = attention_weights(models, anchor, sigma, opts);
  std::vector<const ParamVector*> inputs;
  for (const auto& m : models) inputs.push_back(&m);
  return convex_combination(inputs, beta);
}

}  // namespace

ParamVector macfl_edge_update(const ParamVector& previous_cluster,
                              std::span<const ParamVector> arrived, double sigma1,
                              AttentionOptions opts) {
  return attention_average(previous_cluster, arrived, sigma1, opts);
}

ParamVector macfl_cloud_update(const ParamVector& previous_global,
                               std::span<const ParamVector> cluster_params, double sigma2,
                               AttentionOptions opts) {
  if (cluster_params.empty()) throw InvalidArgument("macfl_cloud_update: no clusters");
  return attention_average(previous_global, cluster_params, sigma2, opts);
}

Rng user_batch_rng(std::uint64_t seed, int user) {
  return make_rng(seed, Stream::user_batches, static_cast<std::uint64_t>(user));
}

Rng user_inner_rng(std::uint64_t seed, int user) {
  return make_rng(seed, Stream::user_inner_batches, static_cast<std::uint64_t>(user));
}

namespace {

mobility::AdjacencyMatrix topology_of(const ExperimentConfig& cfg) {
  if (cfg.topology == "linear") return mobility::build_linear_topology(static_cast<std::size_t>(cfg.n_clusters));
  if (cfg.topology == "custom") {
    auto adj = mobility::AdjacencyMatrix::from_rows(cfg.adjacency);
    if (adj.size() != static_cast<std::size_t>(cfg.n_clusters))
      throw InvalidArgument("custom adjacency size does not match n_clusters");
    return adj;
  }
  throw InvalidArgument("unknown topology '" + cfg.topology + "'");
}

data::MiniBatch loss_rows(const ExperimentConfig& cfg, const ExperimentData& d) {
  std::vector<std::size_t> rows;
  for (const auto& s : d.shards) rows.insert(rows.end(), s.indices.begin(), s.indices.end());
  std::sort(rows.begin(), rows.end());
  if (cfg.loss_sample_cap > 0 && rows.size() > static_cast<std::size_t>(cfg.loss_sample_cap)) {
    auto rng = make_rng(cfg.seed, Stream::loss_sample);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<std::size_t>(cfg.loss_sample_cap));
    std::sort(rows.begin(), rows.end());
  }
  return data::gather(*d.train, rows);
}

}  // namespace

MetricsTrace run_experiment(const ExperimentConfig& cfg, const ExperimentData& d,
                            const RoundObserver& observer) {
  const auto t_start = std::chrono::steady_clock::now();
  const auto M = static_cast<std::size_t>(cfg.n_users);
  const auto N = static_cast<std::size_t>(cfg.n_clusters);
  if (cfg.n_users < 1 || cfg.n_clusters < 1) throw InvalidArgument("need at least one user and one cluster");
  if (!d.train || !d.test) throw InvalidArgument("experiment data is missing a dataset");
  if (d.shards.size() != M) throw InvalidArgument("one shard per user required");
  if (cfg.kappa1 < 1 || cfg.kappa2 < 1 || cfg.resolved_cloud_rounds() < 1)
    throw InvalidArgument("kappa1, kappa2 and the number of cloud rounds must be >= 1");
  cfg.model.validate();

  const auto adj = topology_of(cfg);
  const auto P = cfg.stay_probs.empty()
                     ? mobility::build_transition_matrix(adj, cfg.p_s)
                     : mobility::build_transition_matrix(adj, std::span<const double>(cfg.stay_probs));
  const RoundClock clock{cfg.kappa1, cfg.kappa2, cfg.resolved_cloud_rounds()};
  const AttentionOptions attn{cfg.attention_sign, cfg.cosine};
  const auto grad = models::gradient_fn(cfg.model);
  const bool is_hfl = cfg.algorithm == Algorithm::hfl;

  auto assign_rng = make_rng(cfg.seed, Stream::assignment);
  auto mobility_rng = make_rng(cfg.seed, Stream::mobility);
  auto states = mobility::initial_states(M, N, assign_rng, cfg.balanced_start);

  auto init_rng = make_rng(cfg.seed, Stream::init_params);
  const ParamVector w0 = models::init_params(cfg.model, init_rng);

  std::vector<BatchSampler> samplers;
  samplers.reserve(M);
  for (std::size_t m = 0; m < M; ++m)
    samplers.emplace_back(*d.train, d.shards[m], static_cast<std::size_t>(cfg.batch_size),
                          user_batch_rng(cfg.seed, static_cast<int>(m)),
                          user_inner_rng(cfg.seed, static_cast<int>(m)));

  const auto loss_batch = loss_rows(cfg, d);

  MetricsTrace trace;
  trace.config = cfg;
  trace.initial_global = w0;
  ParamVector global = w0;
  std::vector<ParamVector> clusters(N, w0);

  std::vector<int> start(M), end(M);
  std::vector<ParamVector> user_models(M);
  std::vector<std::vector<double>> grad_sums(M);
  std::vector<bool> uploaded(M);
  std::vector<double> user_weight(M);
  std::vector<std::exception_ptr> failures(M);

  for (int b = 0; b < clock.edge_rounds(); ++b) {
    for (std::size_t m = 0; m < M; ++m) start[m] = states[m].cluster;

    // Local training from each user's current cluster model.
    auto train_user = [&](std::size_t m) {
      try {
        ParamVector w = clusters[static_cast<std::size_t>(start[m])];
        auto r = is_hfl ? local_update(grad, std::move(w), samplers[m], cfg.eta, cfg.kappa1)
                        : macfl_local_update(grad, std::move(w), samplers[m], cfg.eta, cfg.rho,
                                             cfg.kappa1);
        user_models[m] = std::move(r.params);
        grad_sums[m] = std::move(r.grad_sum);
      } catch (...) {
        failures[m] = std::current_exception();
      }
    };
    if (cfg.execution == Execution::parallel) {
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t m = 0; m < static_cast<std::ptrdiff_t>(M); ++m)
        train_user(static_cast<std::size_t>(m));
    } else {
      for (std::size_t m = 0; m < M; ++m) train_user(m);
    }
    try {
      for (auto& f : failures)
        if (f) std::rethrow_exception(f);
    } catch (const NumericDivergence& e) {
      trace.diverged = true;
      trace.error = e.what();
      break;
    }

    // Users move while they train.
    const int transitions = cfg.cadence == MobilityCadence::edge_round ? 1 : cfg.kappa1;
    for (int k = 0; k < transitions; ++k) states = mobility::step_users(states, P, mobility_rng);
    for (std::size_t m = 0; m < M; ++m) end[m] = states[m].cluster;

    int participants = 0;
    std::vector<double> start_sizes(N, 0.0);
    for (std::size_t m = 0; m < M; ++m) start_sizes[static_cast<std::size_t>(start[m])] += 1.0;

    for (std::size_t n = 0; n < N; ++n) {
      std::vector<std::size_t> members;
      if (is_hfl) {
        for (std::size_t m = 0; m < M; ++m)
          if (static_cast<std::size_t>(start[m]) == n) members.push_back(m);
        std::vector<ParamVector> models_in;
        std::vector<bool> flags;
        std::vector<double> weights(members.size(), 1.0 / static_cast<double>(members.size()));
        for (std::size_t q = 0; q < members.size(); ++q) {
          const auto m = members[q];
          models_in.push_back(user_models[m]);
          uploaded[m] = start[m] == end[m];
          flags.push_back(uploaded[m]);
          user_weight[m] = weights[q];
          participants += uploaded[m] ? 1 : 0;
        }
        clusters[n] = hfl_edge_update_models(clusters[n], models_in, flags, weights);
      } else {
        for (std::size_t m = 0; m < M; ++m)
          if (static_cast<std::size_t>(end[m]) == n) members.push_back(m);
        std::vector<ParamVector> arrived;
        for (auto m : members) arrived.push_back(user_models[m]);
        if (!arrived.empty()) {
          const auto beta = attention_weights(arrived, clusters[n], cfg.sigma1, attn);
          for (std::size_t q = 0; q < members.size(); ++q) {
            user_weight[members[q]] = beta[q];
            uploaded[members[q]] = true;
          }
          participants += static_cast<int>(members.size());
        }
        clusters[n] = macfl_edge_update(clusters[n], arrived, cfg.sigma1, attn);
      }
    }

    const ParamVector global_before = global;
    std::vector<double> cluster_weight;
    const bool cloud = clock.closes_cloud_round(b);
    if (cloud) {
      if (is_hfl) {
        cluster_weight.resize(N);
        for (std::size_t n = 0; n < N; ++n) cluster_weight[n] = start_sizes[n] / static_cast<double>(M);
        global = hfl_cloud_update(clusters, cluster_weight);
      } else {
        cluster_weight = attention_weights(clusters, global, cfg.sigma2, attn);
        global = macfl_cloud_update(global, clusters, cfg.sigma2, attn);
      }
      std::fill(clusters.begin(), clusters.end(), global);
    }

    if (observer)
      observer(EdgeRoundEvent{b, cloud, start, end, grad_sums, uploaded, user_weight,
                              cluster_weight, global_before, global, clusters});

    const bool last = b + 1 == clock.edge_rounds();
    if ((b + 1) % std::max(1, cfg.eval_every) == 0 || last) {
      TraceRecord rec;
      rec.round = b + 1;
      rec.t = clock.iteration_after(b);
      const auto test_eval = models::evaluate_full(cfg.model, global.span(), d.test->view(), cfg.execution);
      rec.global_accuracy = test_eval.accuracy;
      rec.global_loss =
          models::evaluate_full(cfg.model, global.span(), loss_batch.view(), cfg.execution).mean_loss;
      if (cfg.eval_clusters) {
        double sum = 0.0;
        for (const auto& c : clusters) {
          const double acc = c == global ? rec.global_accuracy
                                         : models::evaluate(cfg.model, c.span(), *d.test, cfg.execution);
          rec.cluster_accuracy.push_back(acc);
          sum += acc;
        }
        rec.mean_cluster_accuracy = sum / static_cast<double>(N);
      } else {
        rec.mean_cluster_accuracy = rec.global_accuracy;
      }
      rec.participants = participants;
      if (cfg.record_wall_time)
        rec.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      trace.records.push_back(std::move(rec));
    }
  }
  trace.final_global = global;
  return trace;
}

}  // namespace macfl::fed
