#include "macfl/mobility.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "macfl/errors.hpp"

namespace macfl::mobility {

AdjacencyMatrix AdjacencyMatrix::from_rows(const std::vector<std::vector<int>>& rows) {
  const std::size_t n = rows.size();
  if (n == 0) throw InvalidArgument("adjacency matrix must have at least one cluster");
  std::vector<std::uint8_t> entries(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != n) throw InvalidArgument("adjacency matrix must be square");
    for (std::size_t j = 0; j < n; ++j) {
      const int v = rows[i][j];
      if (v != 0 && v != 1) throw InvalidArgument("adjacency entries must be 0 or 1");
      entries[i * n + j] = static_cast<std::uint8_t>(v);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (entries[i * n + i] != 1)
      throw InvalidArgument("adjacency diagonal must be 1 (cluster " + std::to_string(i) + ")");
    for (std::size_t j = 0; j < i; ++j)
      if (entries[i * n + j] != entries[j * n + i])
        throw InvalidArgument("adjacency matrix must be symmetric");
  }
  return AdjacencyMatrix(n, std::move(entries));
}

std::size_t AdjacencyMatrix::degree(std::size_t i) const {
  return static_cast<std::size_t>(
      std::count(entries_.begin() + static_cast<std::ptrdiff_t>(i * n_),
                 entries_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_), std::uint8_t{1}));
}

std::vector<std::vector<int>> AdjacencyMatrix::rows() const {
  std::vector<std::vector<int>> out(n_, std::vector<int>(n_));
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = 0; j < n_; ++j) out[i][j] = entries_[i * n_ + j];
  return out;
}

AdjacencyMatrix build_linear_topology(std::size_t n_clusters) {
  if (n_clusters == 0) throw InvalidArgument("n_clusters must be >= 1");
  std::vector<std::vector<int>> rows(n_clusters, std::vector<int>(n_clusters, 0));
  for (std::size_t i = 0; i < n_clusters; ++i)
    for (std::size_t j = 0; j < n_clusters; ++j)
      rows[i][j] = (i > j ? i - j : j - i) <= 1 ? 1 : 0;
  return AdjacencyMatrix::from_rows(rows);
}

TransitionMatrix::TransitionMatrix(std::size_t n, std::vector<double> entries,
                                   std::vector<double> stay)
    : n_(n), entries_(std::move(entries)), stay_(std::move(stay)) {
  if (entries_.size() != n_ * n_ || stay_.size() != n_)
    throw InvalidArgument("transition matrix dimensions do not match");
}

TransitionMatrix TransitionMatrix::power(int k) const {
  if (k < 0) throw InvalidArgument("matrix power must be non-negative");
  std::vector<double> acc(n_ * n_, 0.0);
  for (std::size_t i = 0; i < n_; ++i) acc[i * n_ + i] = 1.0;
  for (int step = 0; step < k; ++step) {
    std::vector<double> next(n_ * n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t l = 0; l < n_; ++l) {
        const double a = acc[i * n_ + l];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < n_; ++j) next[i * n_ + j] += a * entries_[l * n_ + j];
      }
    acc = std::move(next);
  }
  std::vector<double> diag(n_);
  for (std::size_t i = 0; i < n_; ++i) diag[i] = acc[i * n_ + i];
  return TransitionMatrix(n_, std::move(acc), std::move(diag));
}

TransitionMatrix build_transition_matrix(const AdjacencyMatrix& adj, std::span<const double> stay) {
  const std::size_t n = adj.size();
  if (stay.size() != n) throw InvalidArgument("stay probability vector length must equal N");
  std::vector<double> entries(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double ps = stay[i];
    if (!(ps >= 0.0 && ps <= 1.0))
      throw InvalidArgument("stay probability of cluster " + std::to_string(i) +
                            " must lie in [0,1]");
    const std::size_t deg = adj.degree(i);
    if (deg == 1) {
      if (ps != 1.0)
        throw InvalidArgument("cluster " + std::to_string(i) +
                              " has no neighbours; its stay probability must be 1");
      entries[i * n + i] = 1.0;
      continue;
    }
    const double move = (1.0 - ps) / static_cast<double>(deg - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i)
        entries[i * n + j] = ps;
      else if (adj.connected(i, j))
        entries[i * n + j] = move;
    }
  }
  return TransitionMatrix(n, std::move(entries), std::vector<double>(stay.begin(), stay.end()));
}

TransitionMatrix build_transition_matrix(const AdjacencyMatrix& adj, double stay) {
  std::vector<double> s(adj.size(), stay);
  // isolated clusters cannot move anyone
  for (std::size_t i = 0; i < adj.size(); ++i)
    if (adj.degree(i) == 1) s[i] = 1.0;
  return build_transition_matrix(adj, std::span<const double>(s));
}

std::vector<double> one_hot(const UserState& s, std::size_t n_clusters) {
  if (s.cluster < 0 || static_cast<std::size_t>(s.cluster) >= n_clusters)
    throw InvalidArgument("cluster id out of range");
  std::vector<double> v(n_clusters, 0.0);
  v[static_cast<std::size_t>(s.cluster)] = 1.0;
  return v;
}

std::vector<UserState> initial_states(std::size_t n_users, std::size_t n_clusters, Rng& rng,
                                      bool balanced) {
  if (n_clusters == 0) throw InvalidArgument("n_clusters must be >= 1");
  std::vector<UserState> states(n_users);
  if (balanced) {
    std::vector<int> order(n_users);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < n_users; ++k) {
      const int m = order[k];
      states[static_cast<std::size_t>(m)] = {m, static_cast<int>(k % n_clusters)};
    }
  } else {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(n_clusters) - 1);
    for (std::size_t m = 0; m < n_users; ++m) states[m] = {static_cast<int>(m), pick(rng)};
  }
  return states;
}

std::vector<UserState> step_users(std::span<const UserState> states, const TransitionMatrix& p,
                                  Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<UserState> next(states.begin(), states.end());
  const std::size_t n = p.size();
  for (auto& s : next) {
    if (s.cluster < 0 || static_cast<std::size_t>(s.cluster) >= n)
      throw InvalidArgument("user cluster out of range");
    const auto row = p.row(static_cast<std::size_t>(s.cluster));
    const double u = unif(rng);
    double cum = 0.0;
    std::size_t pick = n;
    std::size_t last_positive = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] <= 0.0) continue;
      last_positive = j;
      cum += row[j];
      if (u < cum) {
        pick = j;
        break;
      }
    }
    // rounding can leave the cumulative sum a hair below 1
    s.cluster = static_cast<int>(pick == n ? last_positive : pick);
  }
  return next;
}

std::vector<double> propagate_marginal(std::span<const double> pi0,
                                       std::span<const TransitionMatrix> sequence) {
  std::vector<double> pi(pi0.begin(), pi0.end());
  for (const auto& p : sequence) {
    if (p.size() != pi.size()) throw InvalidArgument("marginal and transition matrix sizes differ");
    std::vector<double> next(pi.size(), 0.0);
    for (std::size_t i = 0; i < pi.size(); ++i) {
      if (pi[i] == 0.0) continue;
      const auto row = p.row(i);
      for (std::size_t j = 0; j < pi.size(); ++j) next[j] += pi[i] * row[j];
    }
    pi = std::move(next);
  }
  return pi;
}

namespace {

OccupancyReport residuals_from_sizes(std::vector<double> sizes, const TransitionMatrix& p) {
  const std::size_t n = p.size();
  OccupancyReport r;
  r.equilibrium_residuals.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double inflow = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) inflow += sizes[j] * p(j, i);
    r.equilibrium_residuals[i] = sizes[i] * (1.0 - p(i, i)) - inflow;
  }
  r.sizes = std::move(sizes);
  return r;
}

}  // namespace

OccupancyReport occupancy(std::span<const UserState> states, const TransitionMatrix& p) {
  std::vector<double> sizes(p.size(), 0.0);
  for (const auto& s : states) {
    if (s.cluster < 0 || static_cast<std::size_t>(s.cluster) >= p.size())
      throw InvalidArgument("user cluster out of range");
    sizes[static_cast<std::size_t>(s.cluster)] += 1.0;
  }
  return residuals_from_sizes(std::move(sizes), p);
}

OccupancyReport occupancy(const std::vector<std::vector<double>>& marginals,
                          const TransitionMatrix& p) {
  std::vector<double> sizes(p.size(), 0.0);
  for (const auto& pi : marginals) {
    if (pi.size() != p.size()) throw InvalidArgument("marginal length must equal N");
    for (std::size_t i = 0; i < pi.size(); ++i) sizes[i] += pi[i];
  }
  return residuals_from_sizes(std::move(sizes), p);
}

}  // namespace macfl::mobility
