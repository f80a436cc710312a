#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "macfl/models.hpp"
#include "macfl/parallel.hpp"

namespace macfl {

enum class Algorithm { hfl, macfl };

/// When users move. `edge_round`: one Markov transition per edge round, so the
/// upload indicator is 1 with probability p_s. `iteration`: one transition per
/// local SGD step (kappa1 per round); only round endpoints are observable.
enum class MobilityCadence { edge_round, iteration };

enum class CosineForm { standard, squared_norms };

std::string to_string(Algorithm a);
std::string to_string(MobilityCadence c);
std::string to_string(CosineForm f);

/// Every hyperparameter of one experiment. Defaults reproduce the MNIST
/// protocol: 50 users, 5 clusters on a line, kappa1 = 20, kappa2 = 1,
/// eta = 0.001, batch 10, 600 samples per user, 2000 local iterations.
struct ExperimentConfig {
  // [experiment]
  Algorithm algorithm = Algorithm::hfl;
  std::uint64_t seed = 1;
  int n_users = 50;
  int n_clusters = 5;
  int kappa1 = 20;
  int kappa2 = 1;
  int total_iterations = 2000;
  /// Cloud rounds; 0 derives total_iterations / (kappa1 kappa2).
  int cloud_rounds = 0;
  double eta = 0.001;
  int batch_size = 10;
  int eval_every = 1;
  bool eval_clusters = true;
  Execution execution = Execution::parallel;

  // [mobility]
  std::string topology = "linear";
  std::vector<std::vector<int>> adjacency;
  double p_s = 0.5;
  std::vector<double> stay_probs;  // per cluster; overrides p_s when non-empty
  MobilityCadence cadence = MobilityCadence::edge_round;
  bool balanced_start = true;

  // [data]
  std::string source = "idx";  // idx | synthetic
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::string partition = "iid";  // iid | pathological
  int shard_size = 600;
  int classes_per_user = 2;
  int test_limit = 0;         // 0 = whole test set
  int loss_sample_cap = 2000; // train rows used for global_loss; 0 = all shards
  int synth_train_n = 6000;
  int synth_test_n = 2000;
  int synth_dim = 50;
  int synth_classes = 10;
  double synth_separation = 4.0;

  // [model]
  models::ModelSpec model{};

  // [macfl]
  double rho = 0.001;
  double sigma1 = 25.0;
  double sigma2 = 25.0;
  /// -1 reproduces exp(-sigma cos); +1 is the similarity-attracting variant.
  int attention_sign = -1;
  CosineForm cosine = CosineForm::standard;

  // [output]
  std::string out_dir = ".";
  std::string label;   // series label; empty derives one from the algorithm
  std::string recipe = "run";
  bool write_json = true;
  bool record_wall_time = false;

  // [bounds]
  double bound_L = 1.0;
  double bound_sigma = 1.0;
  double bound_G = 1.0;
  double bound_eps_c = 0.1;
  double bound_eps_g = 0.1;
  double bound_f0_gap = 1.0;
  double bound_sigma_M = 1.0;
  double bound_eps_Mc = 0.1;
  double bound_eps_Mg = 0.1;
  /// Explicit weights; empty means the uniform choice 1/M, N/M, 1/N.
  std::vector<double> alpha_user, alpha_user_cluster, alpha_cluster;
  std::vector<double> beta_user, beta_user_cluster;

  // [estimate]
  int estimate_probes = 3;
  int estimate_probe_steps = 200;
  int estimate_batch_budget = 20;

  int edge_rounds() const { return resolved_cloud_rounds() * kappa2; }
  int resolved_cloud_rounds() const {
    return cloud_rounds > 0 ? cloud_rounds : total_iterations / (kappa1 * kappa2);
  }
  std::string series_label() const { return label.empty() ? to_string(algorithm) : label; }
};

}  // namespace macfl
