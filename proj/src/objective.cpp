#include "matmoe/objective.hpp"

#include <stdexcept>

namespace matmoe {

ScaleWeights ScaleWeights::uniform(int g, int l) {
  ScaleWeights w;
  w.g = g;
  w.l = l;
  w.c.assign(static_cast<std::size_t>(g) * l, 1.0);
  return w;
}

void ScaleWeights::validate() const {
  if (g < 1 || l < 1 || c.size() != static_cast<std::size_t>(g) * l)
    throw std::invalid_argument("scale weights: size mismatch");
  bool any_positive = false;
  for (double v : c) {
    if (v < 0.0) throw std::invalid_argument("scale weights: negative entry");
    if (v > 0.0) any_positive = true;
  }
  if (!any_positive) throw std::invalid_argument("scale weights: all zero");
}

void LoadBalanceStats::accumulate(const GateOutput& gate) {
  const int n = gate.scores.cols();
  if (counts.empty()) {
    counts.assign(n, 0);
    mean_scores.assign(n, 0.0);
  }
  if (static_cast<int>(counts.size()) != n)
    throw std::invalid_argument("load balance stats: expert count changed");
  const int t = gate.scores.rows();
  if (!gate.selected.empty()) top_k = static_cast<int>(gate.selected.front().size());
  // mean_scores holds a running sum until fractions()/loss divide by tokens.
  for (int r = 0; r < t; ++r)
    for (int c = 0; c < n; ++c) mean_scores[c] += gate.scores.at(r, c);
  for (const auto& sel : gate.selected)
    for (int e : sel) ++counts[e];
  tokens += t;
}

std::vector<double> LoadBalanceStats::fractions(bool over_k) const {
  if (tokens == 0) throw std::invalid_argument("load balance stats: zero tokens");
  const double denom = static_cast<double>(tokens) * (over_k ? top_k : 1);
  std::vector<double> f(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) f[i] = counts[i] / denom;
  return f;
}

Tensor matryoshka_lm_loss(const std::vector<Tensor>& per_scale_nll, const ScaleWeights& weights) {
  weights.validate();
  if (per_scale_nll.size() != weights.c.size())
    throw std::invalid_argument("lm loss: scale count mismatch");
  const double inv = 1.0 / static_cast<double>(weights.c.size());
  Tensor acc;
  for (std::size_t i = 0; i < per_scale_nll.size(); ++i) {
    Tensor term = scale(per_scale_nll[i], weights.c[i] * inv);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

double matryoshka_lm_loss_value(const std::vector<double>& per_scale_nll,
                                const ScaleWeights& weights) {
  weights.validate();
  if (per_scale_nll.size() != weights.c.size())
    throw std::invalid_argument("lm loss: scale count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < per_scale_nll.size(); ++i) acc += per_scale_nll[i] * weights.c[i];
  return acc / static_cast<double>(weights.c.size());
}

double load_balance_loss(const LoadBalanceStats& stats, int n_routed, bool over_k) {
  if (stats.tokens == 0) throw std::invalid_argument("load balance loss: zero tokens");
  if (static_cast<int>(stats.counts.size()) != n_routed)
    throw std::invalid_argument("load balance loss: expert count mismatch");
  auto f = stats.fractions(over_k);
  double acc = 0.0;
  for (int n = 0; n < n_routed; ++n) acc += f[n] * (stats.mean_scores[n] / stats.tokens);
  return n_routed * acc;
}

Tensor load_balance_loss_tensor(const Tensor& scores, const LoadBalanceStats& stats, int n_routed,
                                bool over_k) {
  if (scores.cols() != n_routed)
    throw std::invalid_argument("load balance loss: score width mismatch");
  auto f = stats.fractions(over_k);
  Tensor f_row = Tensor::from_values(1, n_routed, std::move(f));
  return scale(sum(mul(mean_rows(scores), f_row)), static_cast<double>(n_routed));
}

Tensor total_loss(const Tensor& lm, const std::vector<Tensor>& balance_per_layer_per_scale) {
  if (balance_per_layer_per_scale.empty()) return lm;
  Tensor acc;
  for (const auto& b : balance_per_layer_per_scale) acc = acc.defined() ? add(acc, b) : b;
  const double w = kBalanceLossScale / static_cast<double>(balance_per_layer_per_scale.size());
  return add(lm, scale(acc, w));
}

double total_loss_value(double lm, const std::vector<double>& balance_per_layer_per_scale) {
  if (balance_per_layer_per_scale.empty()) return lm;
  double acc = 0.0;
  for (double b : balance_per_layer_per_scale) acc += b;
  return lm + kBalanceLossScale * acc / static_cast<double>(balance_per_layer_per_scale.size());
}

}  // namespace matmoe
