#pragma once

#include <string>
#include <vector>

#include "matmoe/tensor.hpp"

namespace matmoe {

enum class Modality { kAudio, kVideo, kText };

enum class CompressMode { kAverage, kStack };

// A modality stream at one compression rate.
struct TokenSequence {
  Modality modality = Modality::kAudio;
  int rate = 1;
  Tensor tokens;  // [T, d]
};

// G audio rates x L video rates, both strictly increasing and duplicate-free.
struct RateGrid {
  std::vector<int> audio_rates;
  std::vector<int> video_rates;

  int scales() const { return static_cast<int>(audio_rates.size() * video_rates.size()); }
  void validate() const;
};

// Segment boundaries of one assembled sequence, in token positions.
// Layout is [audio | video | prompt | target].
struct SegmentLayout {
  int audio_begin = 0, audio_end = 0;
  int video_begin = 0, video_end = 0;
  int prompt_begin = 0, prompt_end = 0;
  int target_begin = 0, target_end = 0;

  int total() const { return target_end; }
};

// One grid cell: compressed audio/video feature tensors plus the token ids
// of the textual prompt and target segments, ready for the model to embed.
struct BatchEntry {
  int audio_rate = 1;
  int video_rate = 1;
  Tensor audio;  // compressed audio features [Ta, d_a or r*d_a]
  Tensor video;  // compressed video features [Tv, d_v or r*d_v]
  std::vector<int> prompt_ids;
  std::vector<int> target_ids;
  SegmentLayout layout;
  // Uncompressed stream lengths, used to anchor positional indices to the
  // rate-(1,1) timeline; 0 means "assume the rate divides evenly".
  int raw_audio_len = 0;
  int raw_video_len = 0;
};

// All G*L cells for one sample, row-major over (audio rate i, video rate j).
struct MatryoshkaBatch {
  RateGrid grid;
  CompressMode mode = CompressMode::kAverage;
  std::vector<BatchEntry> entries;

  const BatchEntry& entry(int i, int j) const {
    return entries[static_cast<std::size_t>(i) * grid.video_rates.size() + j];
  }
};

// Average pooling over non-overlapping windows of r tokens; a final partial
// window is averaged over its actual size. Differentiable.
TokenSequence compress_avg(const TokenSequence& seq, int r);

// Concatenates r consecutive tokens along the feature dimension; the final
// partial group is zero-padded. Output is ceil(T/r) x (r*d).
TokenSequence compress_stack(const TokenSequence& seq, int r);

// Assembles all G*L entries for one sample. Audio and video must be rate-1
// sources; prompt/target are token id sequences appended after the AV part.
MatryoshkaBatch build_batch(const TokenSequence& audio, const TokenSequence& video,
                            const std::vector<int>& prompt_ids,
                            const std::vector<int>& target_ids, const RateGrid& grid,
                            CompressMode mode);

inline int compressed_len(int t, int r) { return (t + r - 1) / r; }

}  // namespace matmoe
