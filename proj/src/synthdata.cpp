#include "matmoe/synthdata.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace matmoe {

void SynthSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("synth spec: vocab_size must be >= 2");
  if (target_len_min < 1 || target_len_max < target_len_min)
    throw std::invalid_argument("synth spec: bad target length range");
  if (audio_repeat < 1 || video_repeat < 1)
    throw std::invalid_argument("synth spec: repeats must be >= 1");
  if (d_audio < 1 || d_video < 1) throw std::invalid_argument("synth spec: bad feature dims");
  if (noise_sigma < 0.0) throw std::invalid_argument("synth spec: negative noise sigma");
  if (stream_drop_prob < 0.0 || stream_drop_prob > 1.0)
    throw std::invalid_argument("synth spec: stream_drop_prob must be in [0, 1]");
}

Codebooks make_codebooks(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + 17);
  Codebooks books;
  books.audio = Tensor::gaussian(spec.vocab_size, spec.d_audio, 1.0, rng);
  books.video = Tensor::gaussian(spec.vocab_size, spec.d_video, 1.0, rng);
  return books;
}

Sample generate_sample(const SynthSpec& spec, const Codebooks& books, std::mt19937_64& rng) {
  spec.validate();
  std::uniform_int_distribution<int> len_dist(spec.target_len_min, spec.target_len_max);
  std::uniform_int_distribution<int> sym_dist(0, spec.vocab_size - 1);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  Sample s;
  const int len = len_dist(rng);
  s.target.resize(len);
  for (int i = 0; i < len; ++i) s.target[i] = sym_dist(rng);

  auto emit = [&](const Tensor& book, int repeat, int dim) {
    Tensor stream = Tensor::zeros(len * repeat, dim);
    for (int i = 0; i < len; ++i)
      for (int f = 0; f < repeat; ++f)
        for (int c = 0; c < dim; ++c) {
          double v = book.at(s.target[i], c);
          if (spec.noise_sigma > 0.0) v += noise(rng);
          stream.at(i * repeat + f, c) = v;
        }
    return stream;
  };
  s.audio = emit(books.audio, spec.audio_repeat, spec.d_audio);
  s.video = emit(books.video, spec.video_repeat, spec.d_video);

  // Modality dropout: with probability stream_drop_prob the sample loses one
  // stream (zeroed out), split evenly between audio and video. At most one
  // stream is dropped so every sample stays decodable from the other one.
  if (spec.stream_drop_prob > 0.0) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    if (u < spec.stream_drop_prob) {
      Tensor& victim = (u < spec.stream_drop_prob * 0.5) ? s.audio : s.video;
      std::fill(victim.values().begin(), victim.values().end(), 0.0);
    }
  }
  return s;
}

std::vector<Sample> generate_dataset(const SynthSpec& spec, const Codebooks& books, int count,
                                     std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    // Per-sample derived seeds keep generation order-independent.
    std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dULL + static_cast<std::uint64_t>(i) + 1);
    out.push_back(generate_sample(spec, books, rng));
  }
  return out;
}

Sample corrupt_stream(const Sample& sample, bool corrupt_audio, double snr_db,
                      std::mt19937_64& rng) {
  if (std::isnan(snr_db)) throw std::invalid_argument("corrupt_stream: snr must not be NaN");
  Sample out = sample;
  if (std::isinf(snr_db) && snr_db > 0) return out;

  const Tensor& src = corrupt_audio ? sample.audio : sample.video;
  double signal_power = 0.0;
  for (double v : src.values()) signal_power += v * v;
  signal_power /= static_cast<double>(src.size());
  if (signal_power == 0.0) throw std::invalid_argument("corrupt_stream: zero-power stream");

  const double noise_power = signal_power / std::pow(10.0, snr_db / 10.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> draw(static_cast<std::size_t>(src.size()));
  double empirical = 0.0;
  for (double& v : draw) {
    v = noise(rng);
    empirical += v * v;
  }
  empirical /= static_cast<double>(src.size());
  // Rescale the realized draw so the empirical power ratio hits the target
  // exactly, not just in expectation.
  const double scale = std::sqrt(noise_power / empirical);
  Tensor noisy = Tensor::zeros(src.rows(), src.cols());
  for (std::int64_t i = 0; i < src.size(); ++i)
    noisy.values()[i] = src.values()[i] + scale * draw[static_cast<std::size_t>(i)];
  (corrupt_audio ? out.audio : out.video) = noisy;
  return out;
}

double measure_snr_db(const Tensor& clean, const Tensor& noisy) {
  if (clean.size() != noisy.size()) throw std::invalid_argument("measure_snr_db: size mismatch");
  double sp = 0.0, np = 0.0;
  for (std::int64_t i = 0; i < clean.size(); ++i) {
    sp += clean.values()[i] * clean.values()[i];
    const double d = noisy.values()[i] - clean.values()[i];
    np += d * d;
  }
  if (np == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(sp / np);
}

}  // namespace matmoe
