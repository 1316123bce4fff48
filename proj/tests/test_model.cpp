#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "matmoe/model.hpp"
#include "matmoe/synthdata.hpp"
#include "matmoe/train.hpp"

using namespace matmoe;

namespace {

ModelConfig small_config(Placement placement = Placement::kMhsaParallel) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.ffn_hidden = 64;
  cfg.vocab_size = 35;
  cfg.max_seq_len = 640;
  cfg.mome.placement = placement;
  return cfg;
}

BatchEntry sample_entry(const ModelConfig& cfg, std::uint64_t seed, int i, int j) {
  SynthSpec spec;
  spec.seed = seed;
  Codebooks books = make_codebooks(spec);
  std::mt19937_64 rng(seed);
  Sample s = generate_sample(spec, books, rng);
  VocabLayout vocab{spec.vocab_size};
  return make_entry(s, vocab, cfg.grid, cfg.mode, i, j);
}

std::vector<double> forward_logits(Model& model, const BatchEntry& entry, int scale) {
  return model.forward(entry, scale).logits.values();
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.n_heads = 5;  // does not divide d_model
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("projector forward") {
  std::mt19937_64 rng(3);
  Projector p = make_projector(4, 6, 4, rng);

  // Zero input with zero biases stays zero.
  p.b1 = Tensor::zeros(1, 6);
  p.b2 = Tensor::zeros(1, 4);
  Tensor zeros = projector_forward(p, Tensor::zeros(3, 4));
  for (double v : zeros.values()) CHECK(v == 0.0);

  // Identity-like square weights pass positive input through.
  Projector id;
  std::vector<double> eye46(4 * 6, 0.0), eye64(6 * 4, 0.0);
  for (int i = 0; i < 4; ++i) eye46[static_cast<std::size_t>(i) * 6 + i] = 1.0;
  for (int i = 0; i < 4; ++i) eye64[static_cast<std::size_t>(i) * 4 + i] = 1.0;
  id.w1 = Tensor::from_values(4, 6, eye46);
  id.b1 = Tensor::zeros(1, 6);
  id.w2 = Tensor::from_values(6, 4, eye64);
  id.b2 = Tensor::zeros(1, 4);
  Tensor pos = Tensor::from_values(2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(projector_forward(id, pos).values() == pos.values());

  // Random case vs a two-matmul + relu oracle.
  Projector r = make_projector(4, 6, 5, rng);
  Tensor x = Tensor::uniform(3, 4, 1.5, rng);
  Tensor got = projector_forward(r, x);
  for (int t = 0; t < 3; ++t)
    for (int c = 0; c < 5; ++c) {
      double acc = 0;
      for (int hdim = 0; hdim < 6; ++hdim) {
        double pre = r.b1.at(0, hdim);
        for (int k = 0; k < 4; ++k) pre += x.at(t, k) * r.w1.at(k, hdim);
        acc += std::max(0.0, pre) * r.w2.at(hdim, c);
      }
      acc += r.b2.at(0, c);
      CHECK(std::abs(got.at(t, c) - acc) < 1e-12);
    }
}

TEST_CASE("zero-init anchor holds for every placement and scale") {
  for (Placement placement : {Placement::kFfnParallel, Placement::kMhsaParallel,
                              Placement::kLayerParallel}) {
    ModelConfig cfg = small_config(placement);
    Model model(cfg, 7);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        BatchEntry entry = sample_entry(cfg, 21, i, j);
        const int scale = i * 2 + j;
        model.set_adapters_enabled(false);
        auto frozen = forward_logits(model, entry, scale);
        model.set_adapters_enabled(true);
        auto adapted = forward_logits(model, entry, scale);
        REQUIRE(frozen.size() == adapted.size());
        for (std::size_t k = 0; k < frozen.size(); ++k)
          REQUIRE(std::abs(frozen[k] - adapted[k]) <= 1e-12);
      }
  }
}

TEST_CASE("forward is pure") {
  ModelConfig cfg = small_config();
  Model model(cfg, 11);
  model.set_adapters_enabled(true);
  BatchEntry entry = sample_entry(cfg, 31, 0, 1);
  CHECK(forward_logits(model, entry, 1) == forward_logits(model, entry, 1));
}

TEST_CASE("causality: perturbing a token only affects later positions") {
  for (Placement placement : {Placement::kFfnParallel, Placement::kMhsaParallel,
                              Placement::kLayerParallel}) {
    ModelConfig cfg = small_config(placement);
    Model model(cfg, 13);
    model.set_adapters_enabled(true);
    // Give the adapters nonzero weight so their path is exercised too.
    for (auto& [name, t] : model.adapter_params())
      if (name.find("w_up") != std::string::npos) {
        std::mt19937_64 rng(17);
        for (double& v : t.values()) v = 0.1 * (std::uniform_real_distribution<>(-1, 1)(rng));
      }

    BatchEntry entry = sample_entry(cfg, 41, 1, 1);
    auto base = model.forward(entry, 3).logits;

    const int banged = entry.layout.audio_end + 2;  // a video token
    const int offset = banged - entry.layout.video_begin;
    entry.video.at(offset, 0) += 1.0;
    auto bumped = model.forward(entry, 3).logits;

    bool later_changed = false;
    for (int t = 0; t < base.rows(); ++t)
      for (int c = 0; c < base.cols(); ++c) {
        const double delta = std::abs(base.at(t, c) - bumped.at(t, c));
        if (t < banged) {
          REQUIRE(delta == 0.0);
        } else if (delta > 0) {
          later_changed = true;
        }
      }
    CHECK(later_changed);
  }
}

TEST_CASE("overlong sequences are rejected") {
  ModelConfig cfg = small_config();
  cfg.max_seq_len = 16;
  Model model(cfg, 5);
  BatchEntry entry = sample_entry(cfg, 41, 0, 0);
  CHECK(entry.layout.total() > 16);
  CHECK_THROWS_AS(model.forward(entry, 0), std::invalid_argument);
}

TEST_CASE("greedy decode follows a deterministic distribution") {
  // Token 1 has probability ~1 at every step until the cap.
  StepFn step = [](const std::vector<int>& prefix) {
    std::vector<double> logits(3, -30.0);
    logits[prefix.size() >= 4 ? 2 : 1] = 30.0;
    return logits;
  };
  CHECK(greedy_decode(step, 2, 10) == std::vector<int>{1, 1, 1, 1});
}

TEST_CASE("beam width 1 at temperature 1 is greedy") {
  std::mt19937_64 rng(19);
  std::vector<std::vector<double>> table;
  for (int i = 0; i < 8; ++i) {
    std::vector<double> row(5);
    for (double& v : row) v = std::uniform_real_distribution<>(-2, 2)(rng);
    table.push_back(row);
  }
  StepFn step = [&](const std::vector<int>& prefix) { return table[prefix.size() % 8]; };
  CHECK(beam_decode(step, 4, 6, 1, 1.0) == greedy_decode(step, 4, 6));
}

TEST_CASE("beam search beats greedy on a trap distribution") {
  // From the start, token 0 is locally best but leads to a flat future;
  // token 1 is locally worse but followed by near-certain termination.
  auto log3 = [](double a, double b, double c) {
    return std::vector<double>{std::log(a), std::log(b), std::log(c)};
  };
  StepFn step = [&](const std::vector<int>& prefix) {
    if (prefix.empty()) return log3(0.6, 0.4, 1e-9);
    if (prefix[0] == 0) return log3(1.0 / 3, 1.0 / 3, 1.0 / 3);
    return log3(0.05, 0.05, 0.9);
  };

  // Exhaustive 3-step enumeration oracle over complete (EOS-terminated) paths.
  double best_lp = -1e300;
  std::vector<int> best_seq;
  std::vector<std::vector<int>> frontier = {{}};
  for (int depth = 0; depth < 3; ++depth) {
    std::vector<std::vector<int>> next;
    for (auto& prefix : frontier)
      for (int tok = 0; tok < 3; ++tok) {
        auto seq = prefix;
        seq.push_back(tok);
        double lp = 0;
        std::vector<int> sofar;
        for (int t : seq) {
          lp += step(sofar)[t];
          sofar.push_back(t);
        }
        if (tok == 2 || depth == 2) {
          if (lp > best_lp) {
            best_lp = lp;
            best_seq = seq;
            if (!best_seq.empty() && best_seq.back() == 2) best_seq.pop_back();
          }
        } else {
          next.push_back(seq);
        }
      }
    frontier = next;
  }

  std::vector<int> beam = beam_decode(step, 2, 3, 2, 1.0);
  std::vector<int> greedy = greedy_decode(step, 2, 3);
  CHECK(beam == best_seq);
  CHECK(beam != greedy);
  CHECK(beam == std::vector<int>{1});
}

TEST_CASE("step_fn matches a direct forward on the assembled prefix") {
  ModelConfig cfg = small_config();
  Model model(cfg, 23);
  model.set_adapters_enabled(true);
  BatchEntry entry = sample_entry(cfg, 51, 0, 0);

  // The step function conditioned on k generated tokens must equal the
  // teacher-forced logits at the corresponding position.
  auto step = model.step_fn(entry, 0);
  std::vector<int> generated(entry.target_ids.begin(), entry.target_ids.begin() + 3);
  auto from_step = step(generated);

  auto full = model.forward(entry, 0).logits;
  const int row = entry.layout.target_begin + 2;  // predicts target position 3
  for (int c = 0; c < full.cols(); ++c)
    CHECK(from_step[c] == doctest::Approx(full.at(row, c)).epsilon(1e-12));
}

TEST_CASE("stack projectors warm-start to the average-pooling equivalent") {
  ModelConfig cfg = small_config();
  cfg.mode = CompressMode::kStack;
  Model m(cfg, 5);
  m.warm_start_stack_projectors();

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : m.adapter_params()) by_name.emplace(name, t);

  for (const std::string mod : {"audio", "video"}) {
    const Tensor& w1 = by_name.at("proj." + mod + ".1.w1");
    const int d_in = w1.rows();
    const std::vector<int> rates = mod == "audio" ? cfg.grid.audio_rates : cfg.grid.video_rates;
    for (int r : rates) {
      if (r == 1) continue;
      const std::string p = "proj." + mod + "." + std::to_string(r) + ".";
      const Tensor& w1r = by_name.at(p + "w1");
      REQUIRE(w1r.rows() == r * d_in);
      for (int f = 0; f < r; ++f)
        for (int i = 0; i < d_in; ++i)
          for (int j = 0; j < w1.cols(); ++j)
            CHECK(w1r.at(f * d_in + i, j) == w1.at(i, j) / r);
      CHECK(by_name.at(p + "b1").values() == by_name.at("proj." + mod + ".1.b1").values());
      CHECK(by_name.at(p + "w2").values() == by_name.at("proj." + mod + ".1.w2").values());
      CHECK(by_name.at(p + "b2").values() == by_name.at("proj." + mod + ".1.b2").values());
    }
  }

  // In average mode the call is a no-op (single shared projector).
  ModelConfig avg_cfg = small_config();
  Model ma(avg_cfg, 5);
  auto before = ma.adapter_params();
  std::vector<std::vector<double>> vals;
  for (auto& [n, t] : before) vals.push_back(t.values());
  ma.warm_start_stack_projectors();
  auto after = ma.adapter_params();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i].second.values() == vals[i]);
}
