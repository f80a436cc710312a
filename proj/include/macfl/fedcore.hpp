#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "macfl/datasets.hpp"
#include "macfl/experiment_config.hpp"
#include "macfl/models.hpp"
#include "macfl/rng.hpp"

/// Hierarchical FL with mobile users (indicator-gated uploads) and MACFL
/// (mobility-tolerant uploads, meta-gradient local steps, attention aggregation).
namespace macfl::fed {

using models::GradientFn;
using models::ParamVector;

/// Mini-batch source for one user. The primary stream feeds every SGD step; the
/// inner stream feeds only the inner step of the meta-gradient, so a MACFL run
/// with rho = 0 consumes the primary stream exactly like plain local SGD.
class BatchSampler {
 public:
  BatchSampler(const data::LabeledDataset& ds, const data::Shard& shard, std::size_t batch_size,
               Rng primary, Rng inner);

  data::MiniBatch next();
  data::MiniBatch next_inner();

 private:
  const data::LabeledDataset* ds_;
  const data::Shard* shard_;
  std::size_t batch_size_;
  Rng primary_;
  Rng inner_;
};

struct LocalResult {
  ParamVector params;
  /// Sum of the applied (meta-)gradients over the local steps.
  std::vector<double> grad_sum;
  double last_batch_loss = 0.0;
};

/// `steps` iterations of w <- w - eta g(w, xi) with fresh batches.
LocalResult local_update(const GradientFn& grad, ParamVector start, BatchSampler& sampler,
                         double eta, int steps);

/// `steps` iterations of w <- w - eta g(w - rho g(w, xi_inner), xi).
LocalResult macfl_local_update(const GradientFn& grad, ParamVector start, BatchSampler& sampler,
                               double eta, double rho, int steps);

/// Throws InvalidArgument unless weights are non-negative and sum to 1 within 1e-12.
void check_simplex(std::span<const double> weights, const std::string& what);

/// Sum_k w_k x_k, clamped componentwise to the hull of the inputs with positive
/// weight. Identical inputs therefore reproduce the input bit for bit.
ParamVector convex_combination(std::span<const ParamVector* const> inputs,
                               std::span<const double> weights);

/// Cluster update from gradient sums:
/// w_c - eta * sum_m weight_m * grad_sum_m * I_m over the users in the cluster at round start.
ParamVector hfl_edge_update(const ParamVector& cluster, std::span<const std::vector<double>> grad_sums,
                            const std::vector<bool>& indicators, std::span<const double> weights,
                            double eta);

/// Same update written over the users' final local models, which all started
/// from `cluster`: sum over uploaders of weight_m w_m plus the non-uploaders'
/// weight times the old cluster model. This is the form the simulator runs.
ParamVector hfl_edge_update_models(const ParamVector& cluster,
                                   std::span<const ParamVector> user_models,
                                   const std::vector<bool>& indicators,
                                   std::span<const double> weights);

/// w_g = sum_n alpha_n w_{c_n}. Caller broadcasts the result to every cluster.
ParamVector hfl_cloud_update(std::span<const ParamVector> cluster_params,
                             std::span<const double> alpha_cluster);

/// <x,y> / (|x| |y|); the squared form divides by |x|^2 |y|^2 instead.
double cosine_similarity(std::span<const double> x, std::span<const double> y,
                         CosineForm form = CosineForm::standard);

struct AttentionOptions {
  int sign = -1;
  CosineForm cosine = CosineForm::standard;
};

/// beta_k proportional to exp(sign * sigma * cos(candidate_k, anchor)),
/// evaluated with max-subtraction.
std::vector<double> attention_weights(std::span<const ParamVector> candidates,
                                      const ParamVector& anchor, double sigma,
                                      AttentionOptions opts = {});

/// Attention-weighted average of the models of every user now in the cluster,
/// anchored at the previous cluster model. An empty cluster keeps its model.
ParamVector macfl_edge_update(const ParamVector& previous_cluster,
                              std::span<const ParamVector> arrived, double sigma1,
                              AttentionOptions opts = {});

/// Attention-weighted average of the cluster models, anchored at the global
/// model of the previous cloud round.
ParamVector macfl_cloud_update(const ParamVector& previous_global,
                               std::span<const ParamVector> cluster_params, double sigma2,
                               AttentionOptions opts = {});

/// t = b kappa1 + j; a cloud round closes every kappa2 edge rounds.
struct RoundClock {
  int kappa1 = 1;
  int kappa2 = 1;
  int cloud_rounds = 1;

  int edge_rounds() const { return cloud_rounds * kappa2; }
  /// Edge round b (0-based) ends with a cloud aggregation.
  bool closes_cloud_round(int b) const { return (b + 1) % kappa2 == 0; }
  long iteration_after(int b) const { return static_cast<long>(b + 1) * kappa1; }
};

struct TraceRecord {
  int round = 0;  // completed edge rounds
  long t = 0;     // completed local iterations
  double global_loss = 0.0;
  double global_accuracy = 0.0;
  double mean_cluster_accuracy = 0.0;
  std::vector<double> cluster_accuracy;
  int participants = 0;
  double wall_time_s = 0.0;
};

struct MetricsTrace {
  ExperimentConfig config;
  std::vector<TraceRecord> records;
  bool diverged = false;
  std::string error;
  ParamVector initial_global;
  ParamVector final_global;
};

/// Datasets are shared so that sweep cells can reuse one loaded copy.
struct ExperimentData {
  std::shared_ptr<const data::LabeledDataset> train;
  std::shared_ptr<const data::LabeledDataset> test;
  std::vector<data::Shard> shards;
};

/// Everything the engine knows at the end of one edge round; used by tests
/// and instrumentation.
struct EdgeRoundEvent {
  int round = 0;
  bool cloud_round = false;
  const std::vector<int>& cluster_at_start;
  const std::vector<int>& cluster_at_end;
  const std::vector<std::vector<double>>& grad_sums;
  const std::vector<bool>& uploaded;
  /// HFL: 1/|C_i| of the user's start cluster. MACFL: its attention weight.
  const std::vector<double>& user_weight;
  /// Cloud weights (empty when no cloud aggregation happened).
  const std::vector<double>& cluster_weight;
  const ParamVector& global_before;
  const ParamVector& global_after;
  const std::vector<ParamVector>& clusters;
};

using RoundObserver = std::function<void(const EdgeRoundEvent&)>;

/// Seeds of the per-user batch streams, shared with reference loops in tests.
Rng user_batch_rng(std::uint64_t seed, int user);
Rng user_inner_rng(std::uint64_t seed, int user);

/// Runs the configured algorithm for kappa2 * T edge rounds. Deterministic in
/// config.seed and independent of thread count. Numeric divergence is recorded
/// in the trace and halts the run.
MetricsTrace run_experiment(const ExperimentConfig& cfg, const ExperimentData& data,
                            const RoundObserver& observer = {});

}  // namespace macfl::fed
