#include "matmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace matmoe {

std::vector<double> ActivationHistogram::frequencies(int layer, int scale) const {
  const auto& c = counts[layer][scale];
  const double total = static_cast<double>(std::accumulate(c.begin(), c.end(), std::int64_t{0}));
  std::vector<double> f(c.size(), 0.0);
  if (total > 0)
    for (std::size_t i = 0; i < c.size(); ++i) f[i] = c[i] / total;
  return f;
}

ActivationHistogram expert_activation_stats(Model& model, const std::vector<Sample>& eval_set,
                                            const VocabLayout& vocab, const RateGrid& grid) {
  grid.validate();
  model.set_adapters_enabled(true);
  const auto& cfg = model.config();
  ActivationHistogram hist;
  hist.n_layers = cfg.n_layers;
  hist.n_scales = grid.scales();
  hist.n_experts = cfg.mome.n_routed;
  hist.counts.assign(hist.n_layers,
                     std::vector<std::vector<std::int64_t>>(
                         hist.n_scales, std::vector<std::int64_t>(hist.n_experts, 0)));

  const int l_rates = static_cast<int>(grid.video_rates.size());
  for (const auto& sample : eval_set) {
    auto batch = make_batch(sample, vocab, grid, cfg.mode);
    for (int i = 0; i < static_cast<int>(grid.audio_rates.size()); ++i)
      for (int j = 0; j < l_rates; ++j) {
        const int scale = i * l_rates + j;
        auto res = model.forward(batch.entry(i, j), scale);
        for (int layer = 0; layer < static_cast<int>(res.gates.size()); ++layer)
          for (const auto& sel : res.gates[layer].selected)
            for (int e : sel) ++hist.counts[layer][scale][e];
      }
  }
  return hist;
}

namespace {

std::vector<int> top_m_experts(const std::vector<double>& freq, int m) {
  std::vector<int> order(freq.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return freq[a] > freq[b]; });
  order.resize(std::min<std::size_t>(order.size(), m));
  return order;
}

double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<int> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

}  // namespace

std::vector<double> cross_scale_overlap(const ActivationHistogram& hist, int m) {
  if (m < 1 || m > hist.n_experts) throw std::invalid_argument("cross_scale_overlap: bad m");
  std::vector<double> out(hist.n_layers, 0.0);
  for (int layer = 0; layer < hist.n_layers; ++layer) {
    std::vector<std::vector<int>> tops(hist.n_scales);
    for (int s = 0; s < hist.n_scales; ++s)
      tops[s] = top_m_experts(hist.frequencies(layer, s), m);
    double acc = 0.0;
    int pairs = 0;
    for (int a = 0; a < hist.n_scales; ++a)
      for (int b = a + 1; b < hist.n_scales; ++b) {
        acc += jaccard(tops[a], tops[b]);
        ++pairs;
      }
    out[layer] = pairs > 0 ? acc / pairs : 1.0;
  }
  return out;
}

SimilarityMatrix similarity_matrix(const Tensor& seq_a, const Tensor& seq_b) {
  if (seq_a.cols() != seq_b.cols())
    throw std::invalid_argument("similarity_matrix: feature widths differ");
  SimilarityMatrix sim;
  sim.rows = seq_a.rows();
  sim.cols = seq_b.rows();
  sim.values.assign(static_cast<std::size_t>(sim.rows) * sim.cols, 0.0);
  sim.flagged.assign(sim.values.size(), 0);

  auto norms = [](const Tensor& t) {
    std::vector<double> out(t.rows());
    for (int r = 0; r < t.rows(); ++r) {
      double acc = 0.0;
      for (int c = 0; c < t.cols(); ++c) acc += t.at(r, c) * t.at(r, c);
      out[r] = std::sqrt(acc);
    }
    return out;
  };
  const auto na = norms(seq_a);
  const auto nb = norms(seq_b);

  for (int r = 0; r < sim.rows; ++r)
    for (int c = 0; c < sim.cols; ++c) {
      const std::size_t at = static_cast<std::size_t>(r) * sim.cols + c;
      if (na[r] == 0.0 || nb[c] == 0.0) {
        sim.flagged[at] = 1;  // emitted as 0 with a warning flag
        continue;
      }
      double dot = 0.0;
      for (int k = 0; k < seq_a.cols(); ++k) dot += seq_a.at(r, k) * seq_b.at(c, k);
      sim.values[at] = dot / (na[r] * nb[c]);
    }
  return sim;
}

CostRow token_count(int t_audio, int t_video, int audio_rate, int video_rate, Rounding rounding) {
  if (t_audio < 1 || t_video < 1 || audio_rate < 1 || video_rate < 1)
    throw std::invalid_argument("token_count: lengths and rates must be positive");
  CostRow row;
  row.audio_rate = audio_rate;
  row.video_rate = video_rate;
  if (rounding == Rounding::kCeil) {
    row.audio_tokens = (t_audio + audio_rate - 1) / audio_rate;
    row.video_tokens = (t_video + video_rate - 1) / video_rate;
  } else {
    row.audio_tokens = t_audio / audio_rate;
    row.video_tokens = t_video / video_rate;
  }
  row.total_tokens = row.audio_tokens + row.video_tokens;
  return row;
}

double flops_estimate(const ModelConfig& cfg, int total_tokens) {
  const double t = total_tokens;
  const double d = cfg.d_model;
  // Per layer: QKV+output projections, the quadratic attention term, the
  // MLP, and the adapter branch with N_s + K active bottleneck experts.
  const double proj = 4.0 * 2.0 * t * d * d;
  const double attn = 2.0 * 2.0 * t * t * d;
  const double mlp = 2.0 * 2.0 * t * d * cfg.ffn_hidden;
  double adapter = 0.0;
  if (cfg.mome.n_routed > 0 || cfg.mome.n_shared > 0) {
    const double router = 2.0 * t * d * cfg.mome.n_routed;
    const double experts =
        (cfg.mome.n_shared + cfg.mome.top_k) * 2.0 * 2.0 * t * d * cfg.mome.bottleneck;
    adapter = router + experts;
  }
  const double head = 2.0 * t * d * cfg.vocab_size;
  return cfg.n_layers * (proj + attn + mlp + adapter) + head;
}

std::vector<CostRow> cost_report(const ModelConfig& cfg, int t_audio, int t_video,
                                 const RateGrid& grid, Rounding rounding) {
  std::vector<CostRow> rows;
  auto fill = [&](int ar, int vr) {
    CostRow row = token_count(t_audio, t_video, ar, vr, rounding);
    row.flops = flops_estimate(cfg, row.total_tokens);
    row.active_params = active_param_count(cfg.mome, cfg.d_model, cfg.n_layers).active;
    rows.push_back(row);
  };
  fill(1, 1);
  for (int ar : grid.audio_rates)
    for (int vr : grid.video_rates)
      if (!(ar == 1 && vr == 1)) fill(ar, vr);
  return rows;
}

}  // namespace matmoe
