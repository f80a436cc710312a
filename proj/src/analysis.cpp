#include "macfl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <random>
#include <stdexcept>

#include "macfl/errors.hpp"

namespace macfl::analysis {

namespace {

using ld = long double;

// Neumaier compensated sum.
ld compensated_sum(const std::vector<std::pair<std::string, ld>>& terms) {
  ld sum = 0.0L, c = 0.0L;
  for (const auto& [name, x] : terms) {
    const ld t = sum + x;
    if (std::fabs(sum) >= std::fabs(x))
      c += (sum - t) + x;
    else
      c += (x - t) + sum;
    sum = t;
  }
  return sum + c;
}

BoundValue finish(std::vector<std::pair<std::string, ld>> terms) {
  BoundValue v;
  v.value = compensated_sum(terms);
  v.terms = std::move(terms);
  return v;
}

void require_nonnegative(double x, const char* name) {
  if (!(x >= 0.0) || !std::isfinite(x))
    throw InvalidArgument(std::string(name) + " must be finite and >= 0");
}

void check_common(const BoundInputs& in) {
  if (!(in.L > 0.0)) throw InvalidArgument("L must be > 0");
  if (in.kappa1 < 1 || in.kappa2 < 1) throw InvalidArgument("kappa1 and kappa2 must be >= 1");
  if (in.T < 1) throw InvalidArgument("T must be >= 1");
  if (!(in.eta > 0.0)) throw InvalidArgument("eta must be > 0");
  if (in.M < 1 || in.N < 1) throw InvalidArgument("M and N must be >= 1");
  require_nonnegative(in.f0_gap, "f0_gap");
  const double cap = eta_cap(in.L, in.kappa1, in.kappa2);
  if (in.eta >= cap)
    throw InvalidArgument("eta = " + std::to_string(in.eta) + " violates eta < " +
                          std::to_string(cap));
}

std::vector<double> or_uniform(const std::vector<double>& w, std::size_t M, double fill,
                               const char* name) {
  if (w.empty()) return std::vector<double>(M, fill);
  if (w.size() != M) throw InvalidArgument(std::string(name) + " must have M entries");
  for (double x : w)
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument(std::string(name) + " entries must lie in [0,1]");
  return w;
}

void check_sums_to_one(const std::vector<double>& w, const char* name) {
  ld s = 0.0L;
  for (double x : w) s += x;
  if (std::fabs(s - 1.0L) > 1e-12L) throw InvalidArgument(std::string(name) + " must sum to 1");
}

}  // namespace

void set_uniform_weights(BoundInputs& in) {
  const double M = static_cast<double>(in.M), N = static_cast<double>(in.N);
  in.alpha_user.assign(in.M, 1.0 / M);
  in.alpha_user_cluster.assign(in.M, N / M);
  in.alpha_cluster.assign(in.N, 1.0 / N);
  in.beta_user = in.alpha_user;
  in.beta_user_cluster = in.alpha_user_cluster;
}

long double BoundValue::term(const std::string& name) const {
  for (const auto& [n, v] : terms)
    if (n == name) return v;
  throw InvalidArgument("no bound term named '" + name + "'");
}

double eta_cap(double L, int kappa1, int kappa2) {
  if (!(L > 0.0)) throw InvalidArgument("eta_cap: L must be > 0");
  if (kappa1 < 1 || kappa2 < 1) throw InvalidArgument("eta_cap: kappa1 and kappa2 must be >= 1");
  return 1.0 / (std::sqrt(12.0) * L * kappa1 * kappa2);
}

namespace {

struct HflFactors {
  ld A;        // 12 eta^2 L^2 k1^2 k2^2 p^2
  ld B;        // 12 eta^2 L^2 k1^2 p^2
  ld eight;    // 8 eta^2 L^2 k1^2 k2^2 p^2
  ld eps_g_coef;
  ld eps_c_coef;
  ld mobility_coef;
  ld X;        // (1 - eight) / (1 - B)
};

HflFactors hfl_factors(const BoundInputs& in) {
  const ld eta = in.eta, L = in.L, p = in.p_s, k1 = in.kappa1, k2 = in.kappa2;
  const ld base = eta * eta * L * L * k1 * k1 * p * p;
  HflFactors f{};
  f.A = 12.0L * base * k2 * k2;
  f.B = 12.0L * base;
  f.eight = 8.0L * base * k2 * k2;
  f.eps_g_coef = 4.0L * (1.0L - 6.0L * base * k2 * k2) / (1.0L - f.A);
  f.eps_c_coef = 4.0L * (1.0L + (1.0L - f.eight) * 6.0L * base / ((1.0L - f.A) * (1.0L - f.B)));
  const ld s2 = static_cast<ld>(in.sigma) * in.sigma;
  const ld g2 = static_cast<ld>(in.G) * in.G;
  f.mobility_coef = 8.0L * L * L * eta * eta * k1 * p * (s2 + (1.0L - p) * g2) / (1.0L - f.A);
  f.X = (1.0L - f.eight) / (1.0L - f.B);
  return f;
}

void check_hfl(const BoundInputs& in) {
  check_common(in);
  if (!(in.p_s >= 0.0 && in.p_s <= 1.0)) throw InvalidArgument("p_s must lie in [0,1]");
  if (in.p_s == 0.0)
    throw NumericDivergence("bound is unbounded at p_s = 0: no user ever uploads");
  for (double x : {in.sigma, in.G, in.eps_c, in.eps_g}) require_nonnegative(x, "bound constant");
}

}  // namespace

BoundValue hfl_bound(const BoundInputs& in) {
  check_hfl(in);
  const double M = static_cast<double>(in.M);
  const auto a = or_uniform(in.alpha_user, in.M, 1.0 / M, "alpha_user");
  const auto ac = or_uniform(in.alpha_user_cluster, in.M, static_cast<double>(in.N) / M,
                             "alpha_user_cluster");
  check_sums_to_one(a, "alpha_user");
  if (!in.alpha_cluster.empty()) {
    if (in.alpha_cluster.size() != in.N) throw InvalidArgument("alpha_cluster must have N entries");
    check_sums_to_one(in.alpha_cluster, "alpha_cluster");
  }

  const auto f = hfl_factors(in);
  const ld eta = in.eta, L = in.L, p = in.p_s;
  ld sum_a2 = 0.0L, mob = 0.0L;
  for (std::size_t m = 0; m < in.M; ++m) {
    sum_a2 += static_cast<ld>(a[m]) * a[m];
    mob += a[m] * (2.0L * in.kappa2 * (static_cast<ld>(ac[m]) - a[m]) + f.X * (1.0L - ac[m]));
  }
  return finish({
      {"init", 2.0L * in.f0_gap / (eta * p * static_cast<ld>(in.T))},
      {"variance", eta * L * in.sigma * in.sigma * sum_a2},
      {"eps_g", f.eps_g_coef * in.eps_g * in.eps_g},
      {"eps_c", f.eps_c_coef * in.eps_c * in.eps_c},
      {"mobility", f.mobility_coef * mob},
  });
}

BoundValue corollary_bound(const BoundInputs& in) {
  check_hfl(in);
  const auto f = hfl_factors(in);
  const ld eta = in.eta, L = in.L, p = in.p_s;
  const ld M = static_cast<ld>(in.M), N = static_cast<ld>(in.N);
  return finish({
      {"init", 2.0L * in.f0_gap / (eta * p * static_cast<ld>(in.T))},
      {"variance", eta * L / M * in.sigma * in.sigma},
      {"eps_g", f.eps_g_coef * in.eps_g * in.eps_g},
      {"eps_c", f.eps_c_coef * in.eps_c * in.eps_c},
      {"mobility", f.mobility_coef * (2.0L * in.kappa2 * (N - 1.0L) / M + f.X * (M - N) / M)},
  });
}

BoundValue macfl_bound(const BoundInputs& in) {
  check_common(in);
  for (double x : {in.sigma_M, in.eps_Mc, in.eps_Mg}) require_nonnegative(x, "bound constant");
  const double M = static_cast<double>(in.M);
  const auto b = or_uniform(in.beta_user, in.M, 1.0 / M, "beta_user");
  const auto bc = or_uniform(in.beta_user_cluster, in.M, static_cast<double>(in.N) / M,
                             "beta_user_cluster");
  check_sums_to_one(b, "beta_user");

  const ld eta = in.eta, L = in.L, k1 = in.kappa1, k2 = in.kappa2;
  const ld base = eta * eta * L * L * k1 * k1;
  const ld A = 12.0L * base * k2 * k2;
  const ld B = 12.0L * base;
  const ld X = (1.0L - 8.0L * base * k2 * k2) / (1.0L - B);
  const ld sM2 = static_cast<ld>(in.sigma_M) * in.sigma_M;

  ld sum_b2 = 0.0L, drift = 0.0L;
  for (std::size_t m = 0; m < in.M; ++m) {
    sum_b2 += static_cast<ld>(b[m]) * b[m];
    drift += b[m] * (X * (1.0L - bc[m]) + 2.0L * k2 * (static_cast<ld>(bc[m]) - b[m]));
  }
  return finish({
      {"init", 2.0L * in.f0_gap / (eta * static_cast<ld>(in.T))},
      {"variance", eta * L * sM2 * sum_b2},
      {"eps_Mg", A / (1.0L - A) * in.eps_Mg * in.eps_Mg},
      {"eps_Mc", B * (1.0L - 8.0L * base * k2 * k2) / ((1.0L - B) * (1.0L - A)) * in.eps_Mc *
                     in.eps_Mc},
      {"drift", 4.0L * L * L * eta * eta * k1 / (1.0L - A) * sM2 * drift},
  });
}

std::string to_string(ScanParameter p) {
  switch (p) {
    case ScanParameter::kappa1: return "kappa1";
    case ScanParameter::kappa2: return "kappa2";
    case ScanParameter::kappa1_fixed_product: return "kappa1_fixed_product";
    case ScanParameter::p_s: return "p_s";
    case ScanParameter::eta: return "eta";
    case ScanParameter::T: return "T";
  }
  return "?";
}

ScanParameter scan_parameter_from_string(const std::string& s) {
  for (auto p : {ScanParameter::kappa1, ScanParameter::kappa2, ScanParameter::kappa1_fixed_product,
                 ScanParameter::p_s, ScanParameter::eta, ScanParameter::T})
    if (to_string(p) == s) return p;
  throw InvalidArgument("unknown scan parameter '" + s + "'");
}

namespace {

int as_count(double x, const char* what) {
  if (!(x >= 1.0) || x != std::floor(x) || x > 1e9)
    throw InvalidArgument(std::string(what) + " grid values must be positive integers");
  return static_cast<int>(x);
}

}  // namespace

ScanResult monotonicity_scan(const BoundFn& fn, const BoundInputs& in, ScanParameter parameter,
                             std::span<const double> grid) {
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw InvalidArgument("scan grid must be strictly increasing");

  ScanResult r{parameter, {grid.begin(), grid.end()}, {}, true, true};
  const int product = in.kappa1 * in.kappa2;
  for (double x : grid) {
    BoundInputs p = in;
    switch (parameter) {
      case ScanParameter::kappa1: p.kappa1 = as_count(x, "kappa1"); break;
      case ScanParameter::kappa2: p.kappa2 = as_count(x, "kappa2"); break;
      case ScanParameter::kappa1_fixed_product:
        p.kappa1 = as_count(x, "kappa1");
        if (product % p.kappa1 != 0)
          throw InvalidArgument("kappa1 grid value does not divide kappa1 * kappa2");
        p.kappa2 = product / p.kappa1;
        break;
      case ScanParameter::p_s: p.p_s = x; break;
      case ScanParameter::eta: p.eta = x; break;
      case ScanParameter::T: p.T = as_count(x, "T"); break;
    }
    r.values.push_back(fn(p).value);
  }
  for (std::size_t i = 1; i < r.values.size(); ++i) {
    if (r.values[i] < r.values[i - 1]) r.nondecreasing = false;
    if (r.values[i] > r.values[i - 1]) r.nonincreasing = false;
  }
  return r;
}

ModelOracle::ModelOracle(models::ModelSpec spec, const data::LabeledDataset& ds,
                         std::span<const data::Shard> shards, std::size_t batch_size)
    : spec_(std::move(spec)), ds_(&ds), shards_(shards.begin(), shards.end()),
      batch_size_(batch_size) {
  if (batch_size_ == 0) throw InvalidArgument("ModelOracle: batch size must be >= 1");
  for (const auto& s : shards_) {
    if (s.indices.empty()) throw InvalidArgument("ModelOracle: empty shard");
    full_.push_back(data::gather(ds, s.indices));
  }
}

std::vector<double> ModelOracle::full_gradient(std::size_t user, std::span<const double> w) const {
  return models::gradient(spec_, w, full_.at(user).view()).values;
}

std::vector<double> ModelOracle::batch_gradient(std::size_t user, std::span<const double> w,
                                                Rng& rng) const {
  const auto batch = data::sample_minibatch(*ds_, shards_.at(user), batch_size_, rng);
  return models::gradient(spec_, w, batch.view()).values;
}

namespace {

double dist2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::vector<double> weighted_sum(const std::vector<std::vector<double>>& vs,
                                 const std::vector<std::size_t>& members,
                                 const std::vector<double>& weights) {
  std::vector<double> out(vs[members.front()].size(), 0.0);
  for (std::size_t q = 0; q < members.size(); ++q)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[q] * vs[members[q]][i];
  return out;
}

}  // namespace

ConstantEstimates estimate_constants(const GradientOracle& oracle,
                                     std::span<const models::ParamVector> probes,
                                     const EstimateOptions& opts) {
  if (probes.empty()) throw InvalidArgument("estimate_constants: empty probe set");
  if (opts.batch_budget < 1) throw InvalidArgument("estimate_constants: batch budget must be >= 1");
  if (!(opts.rho >= 0.0)) throw InvalidArgument("estimate_constants: rho must be >= 0");
  const std::size_t M = oracle.users();
  if (opts.cluster_of.size() != M) throw InvalidArgument("estimate_constants: one cluster per user");
  for (const auto& p : probes)
    if (!p.all_finite() || p.size() != probes[0].size())
      throw InvalidArgument("estimate_constants: probes must be finite and of equal length");

  int n_clusters = 0;
  for (int c : opts.cluster_of) {
    if (c < 0) throw InvalidArgument("estimate_constants: negative cluster id");
    n_clusters = std::max(n_clusters, c + 1);
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_clusters));
  for (std::size_t m = 0; m < M; ++m) members[static_cast<std::size_t>(opts.cluster_of[m])].push_back(m);

  std::vector<std::vector<double>> within(members.size());
  for (std::size_t i = 0; i < members.size(); ++i)
    for (auto m : members[i])
      within[i].push_back(opts.alpha_user_cluster.empty()
                              ? 1.0 / static_cast<double>(members[i].size())
                              : opts.alpha_user_cluster.at(m));
  std::vector<double> across(members.size());
  for (std::size_t i = 0; i < members.size(); ++i)
    across[i] = opts.alpha_cluster.empty() ? static_cast<double>(members[i].size()) / static_cast<double>(M)
                                           : opts.alpha_cluster.at(i);

  ConstantEstimates est;
  est.probes = probes.size();
  double eps_c2 = 0.0, eps_g2 = 0.0;
  std::vector<std::vector<std::vector<double>>> full_at(probes.size());

  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto w = probes[k].span();
    auto& grads = full_at[k];
    grads.assign(M, {});
    std::vector<double> sigma(M, 0.0), sigma_M(M, 0.0), L(M, 0.0);
    std::vector<std::exception_ptr> failures(M);

#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t mi = 0; mi < static_cast<std::ptrdiff_t>(M); ++mi) {
      const auto m = static_cast<std::size_t>(mi);
      try {
        auto rng = make_rng(opts.seed, Stream::estimate, k * M + m);
        grads[m] = oracle.full_gradient(m, w);
        const auto& full = grads[m];

        std::vector<double> shifted(w.begin(), w.end());
        for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= opts.rho * full[i];
        const auto full_meta = oracle.full_gradient(m, shifted);

        for (int b = 0; b < opts.batch_budget; ++b) {
          const auto g = oracle.batch_gradient(m, w, rng);
          sigma[m] = std::max(sigma[m], std::sqrt(dist2(g, full)));
          std::vector<double> inner(w.begin(), w.end());
          for (std::size_t i = 0; i < inner.size(); ++i) inner[i] -= opts.rho * g[i];
          const auto gm = oracle.batch_gradient(m, inner, rng);
          sigma_M[m] = std::max(sigma_M[m], std::sqrt(dist2(gm, full_meta)));
        }

        // Secant along a random direction of length 1e-3 (1 + |w|).
        std::normal_distribution<double> normal;
        std::vector<double> dir(w.size());
        double norm = 0.0;
        for (auto& d : dir) {
          d = normal(rng);
          norm += d * d;
        }
        norm = std::sqrt(norm);
        const double h = 1e-3 * (1.0 + std::sqrt(dist2(w, std::vector<double>(w.size(), 0.0))));
        std::vector<double> moved(w.begin(), w.end());
        for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += h * dir[i] / norm;
        const auto gmoved = oracle.full_gradient(m, moved);
        L[m] = std::sqrt(dist2(gmoved, full)) / std::sqrt(dist2(moved, w));
      } catch (...) {
        failures[m] = std::current_exception();
      }
    }
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);

    for (std::size_t m = 0; m < M; ++m) {
      est.sigma = std::max(est.sigma, sigma[m]);
      est.sigma_M = std::max(est.sigma_M, sigma_M[m]);
      est.L = std::max(est.L, L[m]);
      est.G = std::max(est.G, std::sqrt(dist2(grads[m], std::vector<double>(grads[m].size(), 0.0))));
    }

    // Cluster and global gradients from the local ones.
    std::vector<std::vector<double>> cluster_grad(members.size());
    std::vector<double> global(w.size(), 0.0);
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (members[i].empty()) continue;
      cluster_grad[i] = weighted_sum(grads, members[i], within[i]);
      for (std::size_t j = 0; j < global.size(); ++j) global[j] += across[i] * cluster_grad[i][j];
    }
    double g_div = 0.0;
    std::size_t occupied = 0;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (members[i].empty()) continue;
      ++occupied;
      g_div += dist2(cluster_grad[i], global);
      double c_div = 0.0;
      for (auto m : members[i]) c_div += dist2(grads[m], cluster_grad[i]);
      eps_c2 = std::max(eps_c2, c_div / static_cast<double>(members[i].size()));
    }
    eps_g2 = std::max(eps_g2, g_div / static_cast<double>(occupied));
  }

  // Secants between distinct probes.
  for (std::size_t a = 0; a < probes.size(); ++a)
    for (std::size_t b = a + 1; b < probes.size(); ++b) {
      const double d = std::sqrt(dist2(probes[a].span(), probes[b].span()));
      if (d == 0.0) continue;
      for (std::size_t m = 0; m < M; ++m)
        est.L = std::max(est.L, std::sqrt(dist2(full_at[a][m], full_at[b][m])) / d);
    }

  est.eps_c = std::sqrt(eps_c2);
  est.eps_g = std::sqrt(eps_g2);
  return est;
}

}  // namespace macfl::analysis
