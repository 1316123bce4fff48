#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "matmoe/objective.hpp"

using namespace matmoe;

namespace {

// Builds a GateOutput with prescribed hard assignments and scores.
GateOutput fabricate_gate(const std::vector<std::vector<int>>& selected,
                          const std::vector<std::vector<double>>& scores) {
  const int t = static_cast<int>(scores.size());
  const int n = static_cast<int>(scores[0].size());
  std::vector<double> flat_scores, flat_gates(static_cast<std::size_t>(t) * n, 0.0);
  for (const auto& row : scores) flat_scores.insert(flat_scores.end(), row.begin(), row.end());
  for (int row = 0; row < t; ++row)
    for (int e : selected[row])
      flat_gates[static_cast<std::size_t>(row) * n + e] = scores[row][e];
  GateOutput g;
  g.scores = Tensor::from_values(t, n, flat_scores);
  g.gates = Tensor::from_values(t, n, flat_gates);
  g.selected = selected;
  return g;
}

}  // namespace

TEST_CASE("scale weights") {
  ScaleWeights w = ScaleWeights::uniform(2, 2);
  CHECK(w.c == std::vector<double>{1, 1, 1, 1});
  CHECK_NOTHROW(w.validate());

  w.c = {1, -1, 1, 1};
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w.c = {0, 0, 0, 0};
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("matryoshka LM loss") {
  ScaleWeights one = ScaleWeights::uniform(1, 1);
  CHECK(matryoshka_lm_loss_value({0.37}, one) == doctest::Approx(0.37).epsilon(1e-15));

  ScaleWeights four = ScaleWeights::uniform(2, 2);
  CHECK(matryoshka_lm_loss_value({0.5, 0.5, 0.5, 0.5}, four) ==
        doctest::Approx(0.5).epsilon(1e-15));

  // Non-uniform weights [1, 1, 1.5, 2], fine-to-coarse: hand arithmetic
  // gives (0.9 + 0.8 + 1.05 + 1.2) / 4 = 0.9875.
  ScaleWeights nuw;
  nuw.g = 2;
  nuw.l = 2;
  nuw.c = {1, 1, 1.5, 2};
  CHECK(matryoshka_lm_loss_value({0.9, 0.8, 0.7, 0.6}, nuw) ==
        doctest::Approx(0.9875).epsilon(1e-15));

  CHECK_THROWS_AS(matryoshka_lm_loss_value({0.5, 0.5}, four), std::invalid_argument);
}

TEST_CASE("LM loss is linear in each per-scale NLL") {
  ScaleWeights nuw;
  nuw.g = 2;
  nuw.l = 2;
  nuw.c = {1, 1, 1.5, 2};
  std::vector<double> nll = {0.9, 0.8, 0.7, 0.6};
  const double base = matryoshka_lm_loss_value(nll, nuw);
  for (int k = 0; k < 4; ++k) {
    auto bumped = nll;
    bumped[k] += 1e-3;
    const double slope = (matryoshka_lm_loss_value(bumped, nuw) - base) / 1e-3;
    CHECK(slope == doctest::Approx(nuw.c[k] / 4).epsilon(1e-9));
  }
}

TEST_CASE("tensor LM loss agrees with the value form and differentiates") {
  ScaleWeights nuw;
  nuw.g = 2;
  nuw.l = 2;
  nuw.c = {1, 1, 1.5, 2};
  std::vector<Tensor> nll;
  for (double v : {0.9, 0.8, 0.7, 0.6}) nll.push_back(Tensor::scalar_value(v, true));
  Tensor loss = matryoshka_lm_loss(nll, nuw);
  CHECK(loss.scalar() == doctest::Approx(0.9875).epsilon(1e-14));
  backward(loss);
  for (int k = 0; k < 4; ++k) CHECK(nll[k].grad()[0] == doctest::Approx(nuw.c[k] / 4));
}

TEST_CASE("load balance loss at the analytic extremes") {
  const int n_r = 6, k = 2;
  // Perfectly uniform routing: f_n = P_n = 1/N_r, so L_B = 1 for any N_r, K.
  LoadBalanceStats uniform;
  uniform.top_k = k;
  uniform.counts.assign(n_r, 100);
  uniform.mean_scores.assign(n_r, 0.0);
  uniform.tokens = 100 * n_r / k;
  for (auto& p : uniform.mean_scores) p = uniform.tokens / double(n_r);  // running sum form
  CHECK(load_balance_loss(uniform, n_r) == doctest::Approx(1.0).epsilon(1e-12));

  // Total collapse: all assignments and probability on expert 0.
  LoadBalanceStats collapse;
  collapse.top_k = 1;
  collapse.counts.assign(n_r, 0);
  collapse.counts[0] = 500;
  collapse.mean_scores.assign(n_r, 0.0);
  collapse.mean_scores[0] = 500.0;  // running sum of P=1 per token
  collapse.tokens = 500;
  CHECK(load_balance_loss(collapse, n_r) == doctest::Approx(double(n_r)).epsilon(1e-12));
}

TEST_CASE("load balance loss matches a brute-force trace oracle") {
  std::mt19937_64 rng(7);
  const int n_r = 5, k = 2, t = 64;

  std::vector<std::vector<int>> selected(t);
  std::vector<std::vector<double>> scores(t);
  for (int row = 0; row < t; ++row) {
    Tensor s = softmax_rows(Tensor::uniform(1, n_r, 2.0, rng));
    scores[row] = s.values();
    std::vector<int> order(n_r);
    for (int n = 0; n < n_r; ++n) order[n] = n;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[row][a] > scores[row][b]; });
    selected[row] = {order.begin(), order.begin() + k};
    std::sort(selected[row].begin(), selected[row].end());
  }

  GateOutput gate = fabricate_gate(selected, scores);
  LoadBalanceStats stats;
  stats.top_k = k;
  stats.accumulate(gate);

  // Independent count-and-average oracle.
  std::vector<double> f(n_r, 0.0), p(n_r, 0.0);
  for (int row = 0; row < t; ++row) {
    for (int e : selected[row]) f[e] += 1.0;
    for (int n = 0; n < n_r; ++n) p[n] += scores[row][n];
  }
  double expect = 0, expect_raw = 0;
  for (int n = 0; n < n_r; ++n) {
    expect += (f[n] / (k * t)) * (p[n] / t);
    expect_raw += (f[n] / t) * (p[n] / t);
  }
  expect *= n_r;
  expect_raw *= n_r;

  CHECK(std::abs(load_balance_loss(stats, n_r, true) - expect) < 1e-12);
  CHECK(std::abs(load_balance_loss(stats, n_r, false) - expect_raw) < 1e-12);

  // Fractions sum to 1 under the over-k normalization.
  double total_f = 0;
  for (double v : stats.fractions(true)) total_f += v;
  CHECK(std::abs(total_f - 1.0) < 1e-12);
}

TEST_CASE("stochastic uniform routing approaches the minimum") {
  std::mt19937_64 rng(11);
  const int n_r = 8, k = 2;
  LoadBalanceStats stats;
  stats.top_k = k;
  stats.counts.assign(n_r, 0);
  stats.mean_scores.assign(n_r, 0.0);
  const int tokens = 120000;
  std::uniform_int_distribution<int> pick(0, n_r - 1);
  for (int t = 0; t < tokens; ++t) {
    int a = pick(rng), b;
    do { b = pick(rng); } while (b == a);
    stats.counts[a]++;
    stats.counts[b]++;
    for (int n = 0; n < n_r; ++n) stats.mean_scores[n] += 1.0 / n_r;
  }
  stats.tokens = tokens;
  CHECK(load_balance_loss(stats, n_r) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(load_balance_loss(stats, n_r) >= 1.0 - 1e-9);
}

TEST_CASE("differentiable balance loss reaches the router scores") {
  std::mt19937_64 rng(13);
  const int n_r = 4, t = 10;
  Tensor h = Tensor::uniform(t, 6, 1.0, rng, true);
  Tensor w = Tensor::uniform(6, n_r, 1.0, rng, true);
  Tensor scores = softmax_rows(matmul(h, w));

  // Skewed hard counts make the loss sit above its minimum.
  LoadBalanceStats stats;
  stats.top_k = 1;
  stats.counts = {7, 1, 1, 1};
  stats.mean_scores.assign(n_r, 0.0);
  for (int row = 0; row < t; ++row)
    for (int n = 0; n < n_r; ++n) stats.mean_scores[n] += scores.at(row, n);
  stats.tokens = t;

  Tensor lb = load_balance_loss_tensor(scores, stats, n_r);
  CHECK(lb.scalar() == doctest::Approx(load_balance_loss(stats, n_r)).epsilon(1e-12));
  backward(lb);
  REQUIRE(w.has_grad());
  double norm = 0;
  for (double g : w.grad()) norm += g * g;
  CHECK(norm > 0.0);  // the balance loss can actually steer the router
}

TEST_CASE("total loss composition") {
  CHECK(total_loss_value(2.0, {}) == 2.0);
  CHECK(total_loss_value(2.0, {1.0, 1.0, 1.0}) == doctest::Approx(2.01).epsilon(1e-15));
  // Mixed values: mean(1, 2, 3, 6) = 3 -> total = 1.5 + 0.03.
  CHECK(total_loss_value(1.5, {1, 2, 3, 6}) == doctest::Approx(1.53).epsilon(1e-13));

  Tensor lm = Tensor::scalar_value(2.0, true);
  std::vector<Tensor> balances = {Tensor::scalar_value(1.0, true),
                                  Tensor::scalar_value(3.0, true)};
  Tensor total = total_loss(lm, balances);
  CHECK(total.scalar() == doctest::Approx(2.02).epsilon(1e-14));
  backward(total);
  CHECK(lm.grad()[0] == doctest::Approx(1.0));
  CHECK(balances[0].grad()[0] == doctest::Approx(0.005));
}

TEST_CASE("zero-token stats are a contract error") {
  LoadBalanceStats empty;
  empty.top_k = 2;
  empty.counts.assign(4, 0);
  empty.mean_scores.assign(4, 0.0);
  empty.tokens = 0;
  CHECK_THROWS_AS(load_balance_loss(empty, 4), std::invalid_argument);
}
