#include "matmoe/matryoshka.hpp"

#include <stdexcept>

namespace matmoe {

void RateGrid::validate() const {
  if (audio_rates.empty() || video_rates.empty())
    throw std::invalid_argument("rate grid: both rate lists must be non-empty");
  auto check = [](const std::vector<int>& rates, const char* name) {
    int prev = 0;
    for (int r : rates) {
      if (r < 1) throw std::invalid_argument(std::string("rate grid: ") + name + " rate < 1");
      if (r <= prev)
        throw std::invalid_argument(std::string("rate grid: ") + name +
                                    " rates must be strictly increasing");
      prev = r;
    }
  };
  check(audio_rates, "audio");
  check(video_rates, "video");
}

TokenSequence compress_avg(const TokenSequence& seq, int r) {
  if (r <= 0) throw std::invalid_argument("compress_avg: rate must be >= 1");
  TokenSequence out;
  out.modality = seq.modality;
  out.rate = seq.rate * r;
  out.tokens = r == 1 ? seq.tokens : avg_pool_rows(seq.tokens, r);
  return out;
}

TokenSequence compress_stack(const TokenSequence& seq, int r) {
  if (r <= 0) throw std::invalid_argument("compress_stack: rate must be >= 1");
  TokenSequence out;
  out.modality = seq.modality;
  out.rate = seq.rate * r;
  out.tokens = r == 1 ? seq.tokens : stack_pool_rows(seq.tokens, r);
  return out;
}

MatryoshkaBatch build_batch(const TokenSequence& audio, const TokenSequence& video,
                            const std::vector<int>& prompt_ids,
                            const std::vector<int>& target_ids, const RateGrid& grid,
                            CompressMode mode) {
  grid.validate();
  if (audio.rate != 1 || video.rate != 1)
    throw std::invalid_argument("build_batch: audio and video must be rate-1 sources");

  MatryoshkaBatch batch;
  batch.grid = grid;
  batch.mode = mode;
  batch.entries.reserve(grid.scales());

  for (int ai : grid.audio_rates) {
    const TokenSequence a =
        mode == CompressMode::kAverage ? compress_avg(audio, ai) : compress_stack(audio, ai);
    for (int vj : grid.video_rates) {
      const TokenSequence v =
          mode == CompressMode::kAverage ? compress_avg(video, vj) : compress_stack(video, vj);
      BatchEntry e;
      e.audio_rate = ai;
      e.video_rate = vj;
      e.audio = a.tokens;
      e.video = v.tokens;
      e.prompt_ids = prompt_ids;
      e.target_ids = target_ids;
      e.raw_audio_len = audio.tokens.rows();
      e.raw_video_len = video.tokens.rows();
      e.layout.audio_begin = 0;
      e.layout.audio_end = a.tokens.rows();
      e.layout.video_begin = e.layout.audio_end;
      e.layout.video_end = e.layout.video_begin + v.tokens.rows();
      e.layout.prompt_begin = e.layout.video_end;
      e.layout.prompt_end = e.layout.prompt_begin + static_cast<int>(prompt_ids.size());
      e.layout.target_begin = e.layout.prompt_end;
      e.layout.target_end = e.layout.target_begin + static_cast<int>(target_ids.size());
      batch.entries.push_back(std::move(e));
    }
  }
  return batch;
}

}  // namespace matmoe
