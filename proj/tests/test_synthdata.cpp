#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "matmoe/matryoshka.hpp"
#include "matmoe/synthdata.hpp"

using namespace matmoe;

TEST_CASE("spec validation") {
  SynthSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.target_len_min = 10;
  spec.target_len_max = 5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SynthSpec{};
  spec.noise_sigma = -0.1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("noise-free samples repeat their codebook frames exactly") {
  SynthSpec spec;
  spec.noise_sigma = 0.0;
  spec.target_len_min = 3;
  spec.target_len_max = 3;
  spec.audio_repeat = 4;
  Codebooks books = make_codebooks(spec);
  std::mt19937_64 rng(5);
  Sample s = generate_sample(spec, books, rng);

  REQUIRE(int(s.target.size()) == 3);
  CHECK(s.audio.rows() == 12);
  CHECK(s.video.rows() == 15);
  for (int sym = 0; sym < 3; ++sym)
    for (int f = 0; f < 4; ++f)
      for (int c = 0; c < spec.d_audio; ++c)
        CHECK(s.audio.at(sym * 4 + f, c) == books.audio.at(s.target[sym], c));
}

TEST_CASE("generation is seed-deterministic") {
  SynthSpec spec;
  Codebooks books = make_codebooks(spec);
  auto a = generate_dataset(spec, books, 4, 99);
  auto b = generate_dataset(spec, books, 4, 99);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].target == b[i].target);
    CHECK(a[i].audio.values() == b[i].audio.values());
    CHECK(a[i].video.values() == b[i].video.values());
  }
  // Different seed: different content.
  auto c = generate_dataset(spec, books, 4, 100);
  CHECK(a[0].audio.values() != c[0].audio.values());
}

TEST_CASE("noisy frames stay near their codebook vector") {
  SynthSpec spec;
  spec.noise_sigma = 0.1;
  spec.target_len_min = 20;
  spec.target_len_max = 20;
  spec.audio_repeat = 16;
  Codebooks books = make_codebooks(spec);
  std::mt19937_64 rng(7);
  Sample s = generate_sample(spec, books, rng);

  const double bound = 3 * spec.noise_sigma / std::sqrt(double(spec.audio_repeat));
  int violations = 0, checks = 0;
  for (int sym = 0; sym < 20; ++sym)
    for (int c = 0; c < spec.d_audio; ++c) {
      double mean = 0;
      for (int f = 0; f < 16; ++f) mean += s.audio.at(sym * 16 + f, c);
      mean /= 16;
      ++checks;
      if (std::abs(mean - books.audio.at(s.target[sym], c)) > bound) ++violations;
    }
  // 3-sigma bound: expect ~0.3% violations; allow generous slack.
  CHECK(violations < checks / 50);
}

TEST_CASE("pooling a noise-free stream recovers one codebook frame per symbol") {
  // Decodability at every grid rate: with r dividing the per-symbol repeat,
  // each pooled window is exactly one codebook embedding.
  SynthSpec spec;
  spec.noise_sigma = 0.0;
  spec.target_len_min = 6;
  spec.target_len_max = 6;
  Codebooks books = make_codebooks(spec);
  std::mt19937_64 rng(9);
  Sample s = generate_sample(spec, books, rng);

  for (int r : {4, 16}) {
    TokenSequence pooled = compress_avg({Modality::kAudio, 1, s.audio}, r);
    const int per_symbol = spec.audio_repeat / r;
    for (int sym = 0; sym < 6; ++sym)
      for (int w = 0; w < per_symbol; ++w)
        for (int c = 0; c < spec.d_audio; ++c)
          CHECK(pooled.tokens.at(sym * per_symbol + w, c) ==
                doctest::Approx(books.audio.at(s.target[sym], c)).epsilon(1e-12));
  }
}

TEST_CASE("stream corruption") {
  SynthSpec spec;
  Codebooks books = make_codebooks(spec);
  std::mt19937_64 rng(11);
  Sample s = generate_sample(spec, books, rng);

  // +infinity SNR leaves the sample untouched.
  std::mt19937_64 noise_rng(1);
  Sample same = corrupt_stream(s, true, std::numeric_limits<double>::infinity(), noise_rng);
  CHECK(same.audio.values() == s.audio.values());

  // 0 dB: measured SNR within 0.1 dB; video untouched.
  Sample noisy = corrupt_stream(s, true, 0.0, noise_rng);
  CHECK(std::abs(measure_snr_db(s.audio, noisy.audio)) < 0.1);
  CHECK(noisy.video.values() == s.video.values());

  // Corrupting video leaves audio bytes unchanged.
  Sample noisy_v = corrupt_stream(s, false, 5.0, noise_rng);
  CHECK(noisy_v.audio.values() == s.audio.values());
  CHECK(noisy_v.video.values() != s.video.values());

  // Zero-power stream is a contract error.
  Sample flat = s;
  flat.audio = Tensor::zeros(4, 4);
  CHECK_THROWS_AS(corrupt_stream(flat, true, 0.0, noise_rng), std::invalid_argument);
}

TEST_CASE("modality dropout zeroes at most one stream") {
  SynthSpec spec;
  spec.noise_sigma = 0.0;
  spec.stream_drop_prob = 1.0;
  Codebooks books = make_codebooks(spec);

  auto all_zero = [](const Tensor& t) {
    for (double v : t.values())
      if (v != 0.0) return false;
    return true;
  };

  // p = 1: every sample loses exactly one stream, never both.
  int audio_drops = 0, video_drops = 0;
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    Sample s = generate_sample(spec, books, rng);
    const bool a = all_zero(s.audio), v = all_zero(s.video);
    CHECK(a != v);  // exactly one dropped
    audio_drops += a;
    video_drops += v;
  }
  // The drop is split evenly between modalities (binomial n=200, p=0.5).
  CHECK(audio_drops > 60);
  CHECK(video_drops > 60);

  // p = 0: nothing is dropped and the RNG stream is unaffected, so samples
  // are bit-identical to those of a spec without the field.
  spec.stream_drop_prob = 0.0;
  std::mt19937_64 r1(11), r2(11);
  Sample base = generate_sample(spec, books, r1);
  CHECK_FALSE(all_zero(base.audio));
  CHECK_FALSE(all_zero(base.video));
  SynthSpec same = spec;
  Sample again = generate_sample(same, books, r2);
  CHECK(base.audio.values() == again.audio.values());

  // Out-of-range probability is a contract error.
  spec.stream_drop_prob = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
