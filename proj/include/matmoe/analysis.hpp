#pragma once

#include <cstdint>
#include <vector>

#include "matmoe/model.hpp"
#include "matmoe/synthdata.hpp"
#include "matmoe/train.hpp"

namespace matmoe {

// Top-k selection frequencies per (layer, scale, expert) over an eval set.
struct ActivationHistogram {
  int n_layers = 0;
  int n_scales = 0;
  int n_experts = 0;
  // counts[layer][scale][expert]
  std::vector<std::vector<std::vector<std::int64_t>>> counts;

  std::vector<double> frequencies(int layer, int scale) const;
};

ActivationHistogram expert_activation_stats(Model& model, const std::vector<Sample>& eval_set,
                                            const VocabLayout& vocab, const RateGrid& grid);

// Per-layer mean Jaccard index of the top-m most frequent expert sets over
// all scale pairs. Ties on frequency resolve to the lower expert index.
std::vector<double> cross_scale_overlap(const ActivationHistogram& hist, int m);

struct SimilarityMatrix {
  int rows = 0, cols = 0;
  std::vector<double> values;         // cosine similarities, row-major
  std::vector<std::uint8_t> flagged;  // rows/cols hit by a zero-norm token

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

// Pairwise cosine similarity between two projected token sequences.
SimilarityMatrix similarity_matrix(const Tensor& seq_a, const Tensor& seq_b);

struct CostRow {
  int audio_rate = 1, video_rate = 1;
  int audio_tokens = 0, video_tokens = 0, total_tokens = 0;
  double flops = 0.0;
  std::int64_t active_params = 0;
};

enum class Rounding { kCeil, kFloor };

// Compressed per-stream token counts for one rate pair.
CostRow token_count(int t_audio, int t_video, int audio_rate, int video_rate,
                    Rounding rounding = Rounding::kCeil);

// Analytic forward-pass FLOP estimate: quadratic attention term, linear MLP
// term and the adapter term with N_s + K active experts. Not a measurement.
double flops_estimate(const ModelConfig& cfg, int total_tokens);

// Full cost table for a stream-length pair over a grid, including the
// uncompressed (1,1) reference row.
std::vector<CostRow> cost_report(const ModelConfig& cfg, int t_audio, int t_video,
                                 const RateGrid& grid, Rounding rounding = Rounding::kCeil);

}  // namespace matmoe
