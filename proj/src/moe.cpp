#include "matmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace matmoe {

std::string placement_name(Placement p) {
  switch (p) {
    case Placement::kFfnParallel: return "ffn-parallel";
    case Placement::kMhsaParallel: return "mhsa-parallel";
    case Placement::kLayerParallel: return "layer-parallel";
  }
  throw std::logic_error("unreachable placement");
}

Placement placement_from_name(const std::string& name) {
  if (name == "ffn-parallel") return Placement::kFfnParallel;
  if (name == "mhsa-parallel") return Placement::kMhsaParallel;
  if (name == "layer-parallel") return Placement::kLayerParallel;
  throw std::invalid_argument("unknown placement: " + name);
}

void MoMEConfig::validate() const {
  if (n_routed < 0 || n_shared < 0) throw std::invalid_argument("expert counts must be >= 0");
  if (n_routed > 0 && (top_k < 1 || top_k > n_routed))
    throw std::invalid_argument("top_k must satisfy 1 <= K <= N_r");
  if (bottleneck < 1) throw std::invalid_argument("bottleneck must be >= 1");
}

Expert make_expert(int d_model, int bottleneck, std::mt19937_64& rng, bool trainable) {
  Expert e;
  const double limit = 1.0 / std::sqrt(static_cast<double>(d_model));
  e.w_down = Tensor::uniform(d_model, bottleneck, limit, rng, trainable);
  e.w_up = Tensor::zeros(bottleneck, d_model, trainable);
  return e;
}

const Tensor& RouterWeights::for_scale(bool shared_router, int scale_index) const {
  if (shared_router) {
    if (per_scale.size() != 1) throw std::logic_error("shared router expects one weight matrix");
    return per_scale[0];
  }
  if (scale_index < 0 || scale_index >= static_cast<int>(per_scale.size()))
    throw std::out_of_range("router scale index out of range");
  return per_scale[scale_index];
}

Tensor router_scores(const Tensor& h, const Tensor& w) {
  return softmax_rows(matmul(h, w));
}

GateOutput topk_gate(const Tensor& scores, int k) {
  const int n = scores.cols();
  if (k < 1 || k > n) throw std::invalid_argument("topk_gate: k out of range [1, N_r]");
  const int t = scores.rows();

  GateOutput out;
  out.scores = scores;
  out.selected.resize(t);
  std::vector<std::uint8_t> keep(scores.values().size(), 0);
  std::vector<int> order(n);
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < n; ++c) order[c] = c;
    // Ties resolve to the lower expert index.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores.at(r, a) > scores.at(r, b);
    });
    auto& sel = out.selected[r];
    sel.assign(order.begin(), order.begin() + k);
    std::sort(sel.begin(), sel.end());
    for (int c : sel) keep[static_cast<std::size_t>(r) * n + c] = 1;
  }
  out.gates = sparse_mask(scores, keep);
  return out;
}

Tensor expert_forward(const Expert& e, const Tensor& h) {
  return matmul(gelu(matmul(h, e.w_down)), e.w_up);
}

MoMEForwardResult mome_forward(const Tensor& h, const std::vector<Expert>& experts,
                               const RouterWeights& router, const MoMEConfig& cfg,
                               int scale_index) {
  cfg.validate();
  if (static_cast<int>(experts.size()) != cfg.n_shared + cfg.n_routed)
    throw std::invalid_argument("mome_forward: expected " +
                                std::to_string(cfg.n_shared + cfg.n_routed) + " experts, got " +
                                std::to_string(experts.size()));

  MoMEForwardResult res;
  Tensor acc;  // running sum of shared-expert outputs
  for (int s = 0; s < cfg.n_shared; ++s) {
    Tensor y = expert_forward(experts[s], h);
    acc = acc.defined() ? add(acc, y) : y;
  }

  if (cfg.n_routed > 0) {
    res.gate = topk_gate(router_scores(h, router.for_scale(cfg.shared_router, scale_index)),
                         cfg.top_k);
    // Tokens grouped by selected expert; each routed expert runs once on the
    // rows assigned to it.
    const int t = h.rows();
    std::vector<std::vector<int>> assigned(cfg.n_routed);
    for (int r = 0; r < t; ++r)
      for (int e : res.gate.selected[r]) assigned[e].push_back(r);

    Tensor routed_sum;
    for (int e = 0; e < cfg.n_routed; ++e) {
      if (assigned[e].empty()) continue;
      Tensor sub = gather_rows(h, assigned[e]);
      Tensor y = expert_forward(experts[cfg.n_shared + e], sub);
      std::vector<std::pair<int, int>> idx;
      idx.reserve(assigned[e].size());
      for (int r : assigned[e]) idx.emplace_back(r, e);
      Tensor g = gather_elems(res.gate.gates, idx);
      Tensor placed = scatter_rows(row_scale(y, g), assigned[e], t);
      routed_sum = routed_sum.defined() ? add(routed_sum, placed) : placed;
    }
    if (routed_sum.defined()) acc = acc.defined() ? add(acc, routed_sum) : routed_sum;
  }

  res.output = acc.defined() ? acc : Tensor::zeros(h.rows(), h.cols());
  return res;
}

ParamCount active_param_count(const MoMEConfig& cfg, int d_model, int n_layers) {
  const std::int64_t router = static_cast<std::int64_t>(d_model) * cfg.n_routed;
  const std::int64_t per_expert = 2LL * d_model * cfg.bottleneck;
  ParamCount pc;
  pc.active = n_layers * (router + (cfg.n_shared + cfg.top_k) * per_expert);
  pc.resident = n_layers * (router + (cfg.n_shared + cfg.n_routed) * per_expert);
  return pc;
}

}  // namespace matmoe
