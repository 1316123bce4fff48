#pragma once

#include <cstdint>
#include <vector>

#include "matmoe/tensor.hpp"

namespace matmoe {

// Synthetic two-stream transcription task. Each target symbol is emitted as
// a run of identical codebook frames per modality, plus Gaussian noise; the
// codebooks are fixed per seed.
struct SynthSpec {
  int vocab_size = 32;       // symbol alphabet, excludes specials
  int target_len_min = 8;    // S_min
  int target_len_max = 24;   // S_max
  int audio_repeat = 16;     // r_a frames per symbol
  int video_repeat = 5;      // r_v frames per symbol
  int d_audio = 32;
  int d_video = 32;
  double noise_sigma = 0.05;
  double stream_drop_prob = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Sample {
  std::vector<int> target;  // S symbol ids in [0, vocab_size)
  Tensor audio;             // [S*r_a, d_audio]
  Tensor video;             // [S*r_v, d_video]
};

// Frozen per-seed symbol embeddings for both modalities.
struct Codebooks {
  Tensor audio;  // [vocab, d_audio]
  Tensor video;  // [vocab, d_video]
};

Codebooks make_codebooks(const SynthSpec& spec);

Sample generate_sample(const SynthSpec& spec, const Codebooks& books, std::mt19937_64& rng);

std::vector<Sample> generate_dataset(const SynthSpec& spec, const Codebooks& books, int count,
                                     std::uint64_t seed);

// Additive Gaussian noise on one stream, scaled to the requested SNR.
// Passing +infinity returns the sample unchanged.
Sample corrupt_stream(const Sample& sample, bool corrupt_audio, double snr_db,
                      std::mt19937_64& rng);

double measure_snr_db(const Tensor& clean, const Tensor& noisy);

}  // namespace matmoe
