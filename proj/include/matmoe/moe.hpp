#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "matmoe/tensor.hpp"

namespace matmoe {

enum class Placement { kFfnParallel, kMhsaParallel, kLayerParallel };

std::string placement_name(Placement p);
Placement placement_from_name(const std::string& name);

struct MoMEConfig {
  int n_routed = 8;    // N_r
  int n_shared = 1;    // N_s
  int top_k = 2;       // K
  int bottleneck = 8;  // d_b
  Placement placement = Placement::kMhsaParallel;
  bool shared_router = true;  // false = one router per scale (i,j)
  // When false, f_n in the balance loss uses raw per-token counts
  // (divide by tokens) instead of dividing by K*tokens.
  bool balance_fraction_over_k = true;

  void validate() const;
};

// Bottleneck expert: down-projection, GELU, up-projection. w_up starts at
// zero so a fresh expert contributes exactly nothing.
struct Expert {
  Tensor w_down;  // [d_model, d_b]
  Tensor w_up;    // [d_b, d_model]
};

Expert make_expert(int d_model, int bottleneck, std::mt19937_64& rng, bool trainable = true);

// One router weight matrix per scale when routers are disjoint, a single
// entry otherwise.
struct RouterWeights {
  std::vector<Tensor> per_scale;  // each [d_model, n_routed]

  const Tensor& for_scale(bool shared_router, int scale_index) const;
};

// Per-token routing result. Gates are the unmodified softmax scores of the
// selected experts; no renormalization after top-k.
struct GateOutput {
  Tensor scores;                          // [T, N_r], softmax rows (on tape)
  Tensor gates;                           // [T, N_r], sparse (on tape)
  std::vector<std::vector<int>> selected; // per token, K expert indices ascending
};

// Softmax over routed-expert logits for each token.
Tensor router_scores(const Tensor& h, const Tensor& w);

// Keeps the k largest scores per token as gates; ties go to the lower expert
// index. Gradients flow only through retained entries.
GateOutput topk_gate(const Tensor& scores, int k);

// h * w_down -> gelu -> * w_up
Tensor expert_forward(const Expert& e, const Tensor& h);

struct MoMEForwardResult {
  Tensor output;  // [T, d_model]
  GateOutput gate;
};

// Shared experts run on every token; routed experts only on the tokens that
// selected them, scaled by their gate values. experts holds the N_s shared
// experts first, then the N_r routed ones.
MoMEForwardResult mome_forward(const Tensor& h, const std::vector<Expert>& experts,
                               const RouterWeights& router, const MoMEConfig& cfg,
                               int scale_index);

struct ParamCount {
  std::int64_t active = 0;   // per-token activated (router + (N_s + K) experts)
  std::int64_t resident = 0; // all experts resident in memory
};

ParamCount active_param_count(const MoMEConfig& cfg, int d_model, int n_layers);

}  // namespace matmoe
