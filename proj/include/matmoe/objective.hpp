#pragma once

#include <vector>

#include "matmoe/moe.hpp"
#include "matmoe/tensor.hpp"

namespace matmoe {

// Per-scale importance weights c_ij, row-major over (audio rate, video rate).
struct ScaleWeights {
  int g = 1, l = 1;
  std::vector<double> c;  // size g*l, all >= 0, at least one > 0

  static ScaleWeights uniform(int g, int l);
  void validate() const;
  double at(int i, int j) const { return c[static_cast<std::size_t>(i) * l + j]; }
};

// Hard assignment counts and mean routing probabilities for one
// (layer, scale) cell of a batch.
struct LoadBalanceStats {
  std::vector<std::int64_t> counts;  // per routed expert, top-k assignments
  std::vector<double> mean_scores;   // P_n: batch-mean softmax score
  std::int64_t tokens = 0;
  int top_k = 1;

  void accumulate(const GateOutput& gate);
  // f_n under the chosen normalization (counts / (K*tokens) by default).
  std::vector<double> fractions(bool over_k = true) const;
};

// L_LM = (1/(G*L)) * sum_ij nll_ij * c_ij, over tape tensors.
Tensor matryoshka_lm_loss(const std::vector<Tensor>& per_scale_nll, const ScaleWeights& weights);
double matryoshka_lm_loss_value(const std::vector<double>& per_scale_nll,
                                const ScaleWeights& weights);

// L_B = N_r * sum_n f_n * P_n from hard-count statistics (no tape).
double load_balance_loss(const LoadBalanceStats& stats, int n_routed, bool over_k = true);

// Differentiable balance loss for one (layer, scale): f_n from hard counts
// (constant), P_n as the column mean of the on-tape score matrix.
Tensor load_balance_loss_tensor(const Tensor& scores, const LoadBalanceStats& stats, int n_routed,
                                bool over_k = true);

// total = lm + 0.01 * mean(balance terms); an empty list contributes zero.
Tensor total_loss(const Tensor& lm, const std::vector<Tensor>& balance_per_layer_per_scale);
double total_loss_value(double lm, const std::vector<double>& balance_per_layer_per_scale);

inline constexpr double kBalanceLossScale = 0.01;

// Per-step training diagnostics.
struct LossReport {
  std::vector<double> per_scale_nll;  // row-major G x L
  double lm_loss = 0.0;
  double mean_balance = 0.0;
  double total = 0.0;
};

}  // namespace matmoe
