#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "macfl/rng.hpp"

/// Edge-AP topology and the Markov chain that moves users between clusters.
namespace macfl::mobility {

/// Symmetric 0/1 matrix with unit diagonal; row i lists the neighbours of AP i
/// (itself included).
class AdjacencyMatrix {
 public:
  /// Validates symmetry, unit diagonal and 0/1 entries.
  static AdjacencyMatrix from_rows(const std::vector<std::vector<int>>& rows);

  std::size_t size() const { return n_; }
  bool connected(std::size_t i, std::size_t j) const { return entries_[i * n_ + j] != 0; }
  /// |N(c_i)|, including c_i itself.
  std::size_t degree(std::size_t i) const;
  std::vector<std::vector<int>> rows() const;

 private:
  AdjacencyMatrix(std::size_t n, std::vector<std::uint8_t> entries)
      : n_(n), entries_(std::move(entries)) {}
  std::size_t n_ = 0;
  std::vector<std::uint8_t> entries_;
};

/// Path graph with self loops: A[i][j] = 1 iff |i - j| <= 1.
AdjacencyMatrix build_linear_topology(std::size_t n_clusters);

/// Row-stochastic N x N matrix plus the per-cluster stay probabilities it was
/// built from.
class TransitionMatrix {
 public:
  TransitionMatrix(std::size_t n, std::vector<double> entries, std::vector<double> stay);

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {entries_.data() + i * n_, n_}; }
  std::span<const double> stay_probs() const { return stay_; }

  /// k-step matrix P^k (stay_probs become its diagonal).
  TransitionMatrix power(int k) const;

 private:
  std::size_t n_;
  std::vector<double> entries_;
  std::vector<double> stay_;
};

/// P[i][i] = stay[i]; P[i][j] = (1 - stay[i]) / (|N(c_i)| - 1) for neighbours j != i.
/// A cluster without neighbours must have stay[i] = 1.
TransitionMatrix build_transition_matrix(const AdjacencyMatrix& adj, std::span<const double> stay);
TransitionMatrix build_transition_matrix(const AdjacencyMatrix& adj, double stay);

/// Realized connection state of one user.
struct UserState {
  int user_id = 0;
  int cluster = 0;
};

/// One-hot vector pi_{u_m} for a realized state.
std::vector<double> one_hot(const UserState& s, std::size_t n_clusters);

/// Initial placement: `balanced` deals a random permutation of users round-robin
/// over clusters; otherwise each user picks a cluster uniformly at random.
std::vector<UserState> initial_states(std::size_t n_users, std::size_t n_clusters, Rng& rng,
                                      bool balanced = true);

/// Next cluster for every user, drawn independently from its current row of P.
/// Users are visited in index order so the result is a function of the rng state.
std::vector<UserState> step_users(std::span<const UserState> states, const TransitionMatrix& p,
                                  Rng& rng);

/// pi0 * P^0 * P^1 * ... in sequence order.
std::vector<double> propagate_marginal(std::span<const double> pi0,
                                       std::span<const TransitionMatrix> sequence);

struct OccupancyReport {
  std::vector<double> sizes;
  std::vector<double> equilibrium_residuals;
};

/// Cluster sizes S_i and the flow-balance residuals
/// S_i (1 - p_s,i) - sum_{j != i} S_j P[j][i].
OccupancyReport occupancy(std::span<const UserState> states, const TransitionMatrix& p);
OccupancyReport occupancy(const std::vector<std::vector<double>>& marginals,
                          const TransitionMatrix& p);

}  // namespace macfl::mobility
