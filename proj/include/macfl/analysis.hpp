#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "macfl/datasets.hpp"
#include "macfl/models.hpp"
#include "macfl/rng.hpp"

/// Closed-form convergence bounds for HFL and MACFL, plus empirical estimates of
/// the constants they depend on.
namespace macfl::analysis {

struct BoundInputs {
  double eta = 0.001;
  double p_s = 0.5;
  long T = 100;
  double L = 1.0;
  double sigma = 1.0;
  double G = 1.0;
  double eps_c = 0.1;
  double eps_g = 0.1;
  int kappa1 = 20;
  int kappa2 = 1;
  double f0_gap = 1.0;  // E f(w0) - f_inf
  std::size_t M = 50;
  std::size_t N = 5;

  // Per-user weights; empty selects alpha_u = 1/M, alpha_u^c = N/M, alpha_c = 1/N.
  std::vector<double> alpha_user;
  std::vector<double> alpha_user_cluster;
  std::vector<double> alpha_cluster;

  // MACFL constants. beta weights default like their alpha counterparts.
  double sigma_M = 1.0;
  double eps_Mc = 0.1;
  double eps_Mg = 0.1;
  std::vector<double> beta_user;
  std::vector<double> beta_user_cluster;
};

/// Uniform weights: alpha_u = 1/M, alpha_u^c = N/M, alpha_c = 1/N.
void set_uniform_weights(BoundInputs& in);

/// Bound value with its named addends. Evaluated in long double; the total is
/// the compensated sum of the terms.
struct BoundValue {
  long double value = 0.0L;
  std::vector<std::pair<std::string, long double>> terms;

  long double term(const std::string& name) const;
};

/// 1 / (sqrt(12) L kappa1 kappa2).
double eta_cap(double L, int kappa1, int kappa2);

/// HFL bound with general aggregation weights.
/// Throws InvalidArgument when eta >= cap and NumericDivergence when p_s = 0.
BoundValue hfl_bound(const BoundInputs& in);

/// HFL bound specialised to uniform weights; only M and N are read.
BoundValue corollary_bound(const BoundInputs& in);

/// MACFL bound. Independent of p_s.
BoundValue macfl_bound(const BoundInputs& in);

using BoundFn = std::function<BoundValue(const BoundInputs&)>;

enum class ScanParameter { kappa1, kappa2, kappa1_fixed_product, p_s, eta, T };

std::string to_string(ScanParameter p);
ScanParameter scan_parameter_from_string(const std::string& s);

struct ScanResult {
  ScanParameter parameter;
  std::vector<double> grid;
  std::vector<long double> values;
  bool nondecreasing = true;
  bool nonincreasing = true;
};

/// Evaluates `fn` along `grid` (strictly increasing). For kappa1_fixed_product
/// the grid holds kappa1 and kappa2 = kappa1 * kappa2 (of `in`) / kappa1.
ScanResult monotonicity_scan(const BoundFn& fn, const BoundInputs& in, ScanParameter parameter,
                             std::span<const double> grid);

/// Source of per-user gradients for the constant estimators.
class GradientOracle {
 public:
  virtual ~GradientOracle() = default;
  virtual std::size_t users() const = 0;
  /// Gradient of user m's whole local loss.
  virtual std::vector<double> full_gradient(std::size_t user, std::span<const double> w) const = 0;
  /// Mini-batch gradient of user m drawn with `rng`.
  virtual std::vector<double> batch_gradient(std::size_t user, std::span<const double> w,
                                             Rng& rng) const = 0;
};

/// Oracle backed by a model and per-user shards.
class ModelOracle final : public GradientOracle {
 public:
  ModelOracle(models::ModelSpec spec, const data::LabeledDataset& ds,
              std::span<const data::Shard> shards, std::size_t batch_size);

  std::size_t users() const override { return shards_.size(); }
  std::vector<double> full_gradient(std::size_t user, std::span<const double> w) const override;
  std::vector<double> batch_gradient(std::size_t user, std::span<const double> w,
                                     Rng& rng) const override;

 private:
  models::ModelSpec spec_;
  const data::LabeledDataset* ds_;
  std::vector<data::Shard> shards_;
  std::vector<data::MiniBatch> full_;
  std::size_t batch_size_;
};

struct EstimateOptions {
  /// Cluster of each user; must cover every user.
  std::vector<int> cluster_of;
  /// Weight of each user inside its cluster; empty means 1/|C_i|.
  std::vector<double> alpha_user_cluster;
  /// Cluster weights in the global loss; empty means |C_i| / M.
  std::vector<double> alpha_cluster;
  /// Mini-batches drawn per user and probe for the variance estimates.
  int batch_budget = 20;
  /// Inner step of the meta-gradient used for sigma_M.
  double rho = 0.001;
  std::uint64_t seed = 1;
};

/// Empirical maxima over the probe points. They are lower bounds on the true
/// suprema over all w.
struct ConstantEstimates {
  double sigma = 0.0;    // max |g(w, xi) - grad F_m(w)|
  double G = 0.0;        // max |grad F_m(w)|
  double eps_c = 0.0;    // sqrt of max_w max_i mean_{m in C_i} |grad F_m - grad f_i|^2
  double eps_g = 0.0;    // sqrt of max_w mean_i |grad f_i - grad f|^2
  double L = 0.0;        // max secant ratio |grad F_m(a) - grad F_m(b)| / |a - b|
  double sigma_M = 0.0;  // sigma measured on first-order meta-gradients
  std::size_t probes = 0;
};

ConstantEstimates estimate_constants(const GradientOracle& oracle,
                                     std::span<const models::ParamVector> probes,
                                     const EstimateOptions& opts);

}  // namespace macfl::analysis
