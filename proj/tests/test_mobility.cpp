#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "macfl/errors.hpp"
#include "macfl/mobility.hpp"

using namespace macfl;
using namespace macfl::mobility;

namespace {

double row_sum(const TransitionMatrix& p, std::size_t i) {
  double s = 0.0;
  for (double x : p.row(i)) s += x;
  return s;
}

std::vector<UserState> all_in(std::size_t n_users, int cluster) {
  std::vector<UserState> s(n_users);
  for (std::size_t m = 0; m < n_users; ++m) s[m] = {static_cast<int>(m), cluster};
  return s;
}

}  // namespace

TEST_CASE("linear topology") {
  CHECK(build_linear_topology(1).rows() == std::vector<std::vector<int>>{{1}});
  CHECK(build_linear_topology(3).rows() ==
        std::vector<std::vector<int>>{{1, 1, 0}, {1, 1, 1}, {0, 1, 1}});
  const auto a = build_linear_topology(5);
  std::vector<std::size_t> deg;
  for (std::size_t i = 0; i < 5; ++i) deg.push_back(a.degree(i));
  CHECK(deg == std::vector<std::size_t>{2, 3, 3, 3, 2});
  CHECK_THROWS_AS(build_linear_topology(0), InvalidArgument);
}

TEST_CASE("adjacency validation") {
  CHECK_THROWS_AS(AdjacencyMatrix::from_rows({{1, 1}, {0, 1}}), InvalidArgument);
  CHECK_THROWS_AS(AdjacencyMatrix::from_rows({{0, 1}, {1, 1}}), InvalidArgument);
  CHECK_THROWS_AS(AdjacencyMatrix::from_rows({{1, 2}, {2, 1}}), InvalidArgument);
}

TEST_CASE("transition matrix entries") {
  const auto p = build_transition_matrix(build_linear_topology(3), 0.5);
  CHECK(p(1, 0) == 0.25);
  CHECK(p(1, 1) == 0.5);
  CHECK(p(1, 2) == 0.25);
  CHECK(p(0, 0) == 0.5);
  CHECK(p(0, 1) == 0.5);
  CHECK(p(0, 2) == 0.0);

  const auto id = build_transition_matrix(build_linear_topology(4), 1.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(id(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("isolated cluster must keep its users") {
  const auto a = AdjacencyMatrix::from_rows({{1, 0}, {0, 1}});
  const std::vector<double> stay{0.5, 1.0};
  CHECK_THROWS_AS(build_transition_matrix(a, stay), InvalidArgument);
  const std::vector<double> ok{1.0, 1.0};
  CHECK_NOTHROW(build_transition_matrix(a, ok));
}

TEST_CASE("property: every constructed transition matrix is row-stochastic") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const auto a = build_linear_topology(n);
    std::vector<double> stay(n);
    for (auto& s : stay) s = u(rng);
    const auto p = build_transition_matrix(a, stay);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(row_sum(p, i) - 1.0) <= 1e-12);
      CHECK(p(i, i) == stay[i]);
      for (std::size_t j = 0; j < n; ++j)
        if (!a.connected(i, j)) CHECK(p(i, j) == 0.0);
    }
  }
}

TEST_CASE("step_users") {
  auto rng = make_rng(3, Stream::mobility);
  SUBCASE("identity keeps everyone in place for any horizon") {
    const auto p = build_transition_matrix(build_linear_topology(5), 1.0);
    auto s = initial_states(40, 5, rng);
    const auto start = s;
    for (int t = 0; t < 100; ++t) s = step_users(s, p, rng);
    for (std::size_t m = 0; m < s.size(); ++m) CHECK(s[m].cluster == start[m].cluster);
  }
  SUBCASE("deterministic row") {
    const TransitionMatrix p(2, {0.0, 1.0, 1.0, 0.0}, {0.0, 0.0});
    const auto next = step_users(all_in(5, 0), p, rng);
    for (const auto& u : next) CHECK(u.cluster == 1);
  }
  SUBCASE("Monte Carlo frequencies from the middle of a 3-path") {
    const auto p = build_transition_matrix(build_linear_topology(3), 0.5);
    const auto next = step_users(all_in(100000, 1), p, rng);
    std::vector<double> freq(3, 0.0);
    for (const auto& u : next) freq[static_cast<std::size_t>(u.cluster)] += 1e-5;
    CHECK(std::abs(freq[0] - 0.25) <= 0.01);
    CHECK(std::abs(freq[1] - 0.5) <= 0.01);
    CHECK(std::abs(freq[2] - 0.25) <= 0.01);
  }
  SUBCASE("same stream state gives the same moves") {
    const auto p = build_transition_matrix(build_linear_topology(5), 0.3);
    auto r1 = make_rng(9, Stream::mobility), r2 = make_rng(9, Stream::mobility);
    const auto s = initial_states(50, 5, r1);
    const auto s2 = initial_states(50, 5, r2);
    const auto a = step_users(s, p, r1), b = step_users(s2, p, r2);
    for (std::size_t m = 0; m < a.size(); ++m) CHECK(a[m].cluster == b[m].cluster);
  }
}

TEST_CASE("propagate_marginal") {
  const auto p = build_transition_matrix(build_linear_topology(3), 0.5);
  const std::vector<TransitionMatrix> one{p};

  const std::vector<double> e0{1.0, 0.0, 0.0};
  auto r = propagate_marginal(e0, one);
  CHECK(r[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r[2] == 0.0);

  const std::vector<double> uni{1.0 / 3, 1.0 / 3, 1.0 / 3};
  // Uniform is not stationary on a path: mass drifts to the middle.
  r = propagate_marginal(uni, one);
  CHECK(std::abs(r[0] - 0.25) <= 1e-12);
  CHECK(std::abs(r[1] - 0.5) <= 1e-12);
  CHECK(std::abs(r[2] - 0.25) <= 1e-12);

  const auto id = build_transition_matrix(build_linear_topology(3), 1.0);
  const std::vector<TransitionMatrix> ids(7, id);
  const std::vector<double> pi{0.2, 0.3, 0.5};
  CHECK(propagate_marginal(pi, ids) == pi);

  const std::vector<double> wrong{0.5, 0.5};
  CHECK_THROWS_AS(propagate_marginal(wrong, one), InvalidArgument);
}

TEST_CASE("property: propagate_marginal is linear and mass preserving") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto p = build_transition_matrix(build_linear_topology(5), 0.35);
  const std::vector<TransitionMatrix> seq(6, p);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(5), b(5);
    double sa = 0, sb = 0;
    for (auto& x : a) sa += x = u(rng);
    for (auto& x : b) sb += x = u(rng);
    for (auto& x : a) x /= sa;
    for (auto& x : b) x /= sb;
    const double lam = u(rng);
    std::vector<double> mix(5);
    for (std::size_t i = 0; i < 5; ++i) mix[i] = lam * a[i] + (1 - lam) * b[i];
    const auto ra = propagate_marginal(a, seq), rb = propagate_marginal(b, seq);
    const auto rm = propagate_marginal(mix, seq);
    double total = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::abs(rm[i] - (lam * ra[i] + (1 - lam) * rb[i])) <= 1e-12);
      total += rm[i];
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("property: Monte Carlo marginals match propagate_marginal") {
  const auto p = build_transition_matrix(build_linear_topology(5), 0.5);
  auto rng = make_rng(21, Stream::mobility);
  auto s = all_in(100000, 0);
  const int t = 6;
  for (int k = 0; k < t; ++k) s = step_users(s, p, rng);
  std::vector<double> freq(5, 0.0);
  for (const auto& u : s) freq[static_cast<std::size_t>(u.cluster)] += 1e-5;
  const std::vector<double> e0{1, 0, 0, 0, 0};
  const auto exact = propagate_marginal(e0, std::vector<TransitionMatrix>(t, p));
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(freq[i] - exact[i]) <= 0.02);
}

TEST_CASE("occupancy and flow balance") {
  SUBCASE("static users") {
    const auto p = build_transition_matrix(build_linear_topology(4), 1.0);
    auto rng = make_rng(1, Stream::assignment);
    const auto r = occupancy(initial_states(20, 4, rng), p);
    for (double x : r.equilibrium_residuals) CHECK(x == 0.0);
  }
  SUBCASE("complete graph with uniform occupancy balances") {
    const auto a = AdjacencyMatrix::from_rows({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}});
    const auto p = build_transition_matrix(a, 0.4);
    std::vector<UserState> s;
    for (int m = 0; m < 30; ++m) s.push_back({m, m % 3});
    const auto r = occupancy(s, p);
    for (double x : r.equilibrium_residuals) CHECK(std::abs(x) <= 1e-9);
  }
  SUBCASE("5-path boundaries do not balance") {
    const auto p = build_transition_matrix(build_linear_topology(5), 0.5);
    std::vector<UserState> s;
    for (int m = 0; m < 50; ++m) s.push_back({m, m % 5});
    const auto r = occupancy(s, p);
    const std::vector<double> expect{2.5, -2.5, 0.0, -2.5, 2.5};
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(r.equilibrium_residuals[i] - expect[i]) <= 1e-12);
    CHECK(r.equilibrium_residuals[0] != 0.0);
  }
}

TEST_CASE("property: total occupancy equals M at every step") {
  const auto p = build_transition_matrix(build_linear_topology(5), 0.2);
  auto rng = make_rng(4, Stream::mobility);
  auto s = initial_states(53, 5, rng, false);
  for (int t = 0; t < 50; ++t) {
    const auto r = occupancy(s, p);
    double total = 0.0;
    for (double x : r.sizes) total += x;
    CHECK(std::abs(total - 53.0) <= 1e-9);
    s = step_users(s, p, rng);
  }
}

TEST_CASE("balanced initial placement") {
  auto rng = make_rng(2, Stream::assignment);
  const auto s = initial_states(50, 5, rng);
  std::vector<int> count(5, 0);
  for (const auto& u : s) ++count[static_cast<std::size_t>(u.cluster)];
  for (int c : count) CHECK(c == 10);
  const auto v = one_hot(s[0], 5);
  double sum = 0.0;
  for (double x : v) sum += x;
  CHECK(sum == 1.0);
}
