#include "matmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace matmoe {

void ModelConfig::validate() const {
  if (d_model % n_heads != 0)
    throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  if (vocab_size < 2 || max_seq_len < 2 || n_layers < 1)
    throw std::invalid_argument("model config: degenerate dimensions");
  grid.validate();
  mome.validate();
}

Projector make_projector(int d_in, int hidden, int d_model, std::mt19937_64& rng) {
  Projector p;
  const double l1 = 1.0 / std::sqrt(static_cast<double>(d_in));
  const double l2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.w1 = Tensor::uniform(d_in, hidden, l1, rng, true);
  p.b1 = Tensor::zeros(1, hidden, true);
  p.w2 = Tensor::uniform(hidden, d_model, l2, rng, true);
  p.b2 = Tensor::zeros(1, d_model, true);
  return p;
}

Tensor projector_forward(const Projector& p, const Tensor& tokens) {
  if (tokens.cols() != p.w1.rows())
    throw std::invalid_argument("projector: input width " + std::to_string(tokens.cols()) +
                                " does not match weight width " + std::to_string(p.w1.rows()));
  return add_rowvec(matmul(relu(add_rowvec(matmul(tokens, p.w1), p.b1)), p.w2), p.b2);
}

namespace {

Tensor init_weight(int rows, int cols, std::mt19937_64& rng) {
  return Tensor::uniform(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)), rng, true);
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.d_model;

  tok_emb_ = Tensor::gaussian(cfg_.vocab_size, d, 0.02, rng, true);
  pos_emb_ = Tensor::gaussian(cfg_.max_seq_len, d, 0.02, rng, true);
  final_ln_gain_ = Tensor::full(1, d, 1.0, true);
  final_ln_bias_ = Tensor::zeros(1, d, true);
  head_ = init_weight(d, cfg_.vocab_size, rng);

  const int n_scales = cfg_.grid.scales();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = Tensor::full(1, d, 1.0, true);
    lw.ln1_bias = Tensor::zeros(1, d, true);
    lw.ln2_gain = Tensor::full(1, d, 1.0, true);
    lw.ln2_bias = Tensor::zeros(1, d, true);
    lw.attn.wq = init_weight(d, d, rng);
    lw.attn.wk = init_weight(d, d, rng);
    lw.attn.wv = init_weight(d, d, rng);
    lw.attn.wo = init_weight(d, d, rng);
    lw.ffn_w1 = init_weight(d, cfg_.ffn_hidden, rng);
    lw.ffn_b1 = Tensor::zeros(1, cfg_.ffn_hidden, true);
    lw.ffn_w2 = init_weight(cfg_.ffn_hidden, d, rng);
    lw.ffn_b2 = Tensor::zeros(1, d, true);
    layers_.push_back(std::move(lw));

    MoMELayer ml;
    for (int e = 0; e < cfg_.mome.n_shared + cfg_.mome.n_routed; ++e)
      ml.experts.push_back(make_expert(d, cfg_.mome.bottleneck, rng));
    const int n_routers = cfg_.mome.shared_router ? 1 : n_scales;
    for (int s = 0; s < n_routers; ++s)
      ml.router.per_scale.push_back(init_weight(d, cfg_.mome.n_routed > 0 ? cfg_.mome.n_routed : 1,
                                                rng));
    mome_layers_.push_back(std::move(ml));
  }

  if (cfg_.mode == CompressMode::kAverage) {
    audio_projs_.emplace(0, make_projector(cfg_.d_audio_in, cfg_.proj_hidden, d, rng));
    video_projs_.emplace(0, make_projector(cfg_.d_video_in, cfg_.proj_hidden, d, rng));
  } else {
    // Stack mode widens the input by the rate, so each rate needs its own
    // projector. Rate 1 is kept available for pretraining.
    auto add_rates = [&](std::map<int, Projector>& dst, const std::vector<int>& rates, int d_in) {
      dst.emplace(1, make_projector(d_in, cfg_.proj_hidden, d, rng));
      for (int r : rates)
        if (!dst.count(r)) dst.emplace(r, make_projector(r * d_in, cfg_.proj_hidden, d, rng));
    };
    add_rates(audio_projs_, cfg_.grid.audio_rates, cfg_.d_audio_in);
    add_rates(video_projs_, cfg_.grid.video_rates, cfg_.d_video_in);
  }
}

const Projector& Model::projector_for(Modality modality, int rate) const {
  const auto& projs = modality == Modality::kAudio ? audio_projs_ : video_projs_;
  const int key = cfg_.mode == CompressMode::kAverage ? 0 : rate;
  auto it = projs.find(key);
  if (it == projs.end())
    throw std::invalid_argument("no projector for rate " + std::to_string(rate));
  return it->second;
}

Tensor Model::project_tokens(const Tensor& features, Modality modality, int rate) const {
  return projector_forward(projector_for(modality, rate), features);
}

Tensor Model::attention(const Tensor& x, int layer) {
  const auto& w = layers_[layer].attn;
  const int t = x.rows();
  const int dh = cfg_.d_model / cfg_.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = matmul(x, w.wq);
  Tensor k = matmul(x, w.wk);
  Tensor v = matmul(x, w.wv);

  // Additive causal mask; -1e30 above the diagonal.
  Tensor mask = Tensor::zeros(t, t);
  for (int r = 0; r < t; ++r)
    for (int c = r + 1; c < t; ++c) mask.at(r, c) = -1e30;

  std::vector<Tensor> heads;
  heads.reserve(cfg_.n_heads);
  for (int h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor att = softmax_rows(add(scale(matmul_bt(qh, kh), inv_sqrt), mask));
    heads.push_back(matmul(att, vh));
  }
  return matmul(concat_cols(heads), w.wo);
}

Tensor Model::ffn(const Tensor& x, int layer) {
  const auto& lw = layers_[layer];
  return add_rowvec(matmul(gelu(add_rowvec(matmul(x, lw.ffn_w1), lw.ffn_b1)), lw.ffn_w2),
                    lw.ffn_b2);
}

Tensor Model::layer_forward(const Tensor& z, int layer, int scale_index,
                            std::vector<GateOutput>* gates) {
  const auto& lw = layers_[layer];
  Tensor ln1 = layernorm_rows(z, lw.ln1_gain, lw.ln1_bias);

  auto run_mome = [&](const Tensor& input) {
    auto res = mome_forward(input, mome_layers_[layer].experts, mome_layers_[layer].router,
                            cfg_.mome, scale_index);
    if (gates && cfg_.mome.n_routed > 0) gates->push_back(res.gate);
    return res.output;
  };

  if (!adapters_enabled_) {
    Tensor h = add(attention(ln1, layer), z);
    return add(ffn(layernorm_rows(h, lw.ln2_gain, lw.ln2_bias), layer), h);
  }

  switch (cfg_.mome.placement) {
    case Placement::kFfnParallel: {
      Tensor h = add(attention(ln1, layer), z);
      Tensor ln2 = layernorm_rows(h, lw.ln2_gain, lw.ln2_bias);
      return add(add(ffn(ln2, layer), run_mome(ln2)), h);
    }
    case Placement::kMhsaParallel: {
      Tensor h = add(add(attention(ln1, layer), run_mome(ln1)), z);
      return add(ffn(layernorm_rows(h, lw.ln2_gain, lw.ln2_bias), layer), h);
    }
    case Placement::kLayerParallel: {
      Tensor h = add(attention(ln1, layer), z);
      Tensor out = add(ffn(layernorm_rows(h, lw.ln2_gain, lw.ln2_bias), layer), h);
      return add(out, run_mome(ln1));
    }
  }
  throw std::logic_error("unreachable placement");
}

ForwardResult Model::forward(const BatchEntry& entry, int scale_index) {
  const auto& lay = entry.layout;
  // Positional ids are anchored to the uncompressed timeline: an AV token at
  // compressed index m keeps the raw position of its window start, and the
  // text segment keeps the raw positions it would occupy at rate (1,1). The
  // frozen backbone therefore sees the positional cues it was pretrained on
  // at every compression scale.
  const int raw_a = entry.raw_audio_len > 0 ? entry.raw_audio_len
                                            : entry.audio.rows() * entry.audio_rate;
  const int raw_v = entry.raw_video_len > 0 ? entry.raw_video_len
                                            : entry.video.rows() * entry.video_rate;
  const int text_len = static_cast<int>(entry.prompt_ids.size() + entry.target_ids.size());
  const int raw_extent = raw_a + raw_v + text_len;
  if (lay.total() > cfg_.max_seq_len || raw_extent > cfg_.max_seq_len)
    throw std::invalid_argument("sequence length " +
                                std::to_string(std::max(lay.total(), raw_extent)) +
                                " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));

  Tensor audio = project_tokens(entry.audio, Modality::kAudio, entry.audio_rate);
  Tensor video = project_tokens(entry.video, Modality::kVideo, entry.video_rate);
  std::vector<int> text_ids = entry.prompt_ids;
  text_ids.insert(text_ids.end(), entry.target_ids.begin(), entry.target_ids.end());

  std::vector<Tensor> parts{audio, video};
  if (!text_ids.empty()) parts.push_back(embedding_lookup(tok_emb_, text_ids));
  Tensor x = concat_rows(parts);

  std::vector<int> positions;
  positions.reserve(x.rows());
  for (int m = 0; m < audio.rows(); ++m) positions.push_back(m * entry.audio_rate);
  for (int m = 0; m < video.rows(); ++m) positions.push_back(raw_a + m * entry.video_rate);
  for (int t = 0; t < text_len; ++t) positions.push_back(raw_a + raw_v + t);
  x = add(x, gather_rows(pos_emb_, positions));

  ForwardResult res;
  for (int l = 0; l < cfg_.n_layers; ++l)
    x = layer_forward(x, l, scale_index, &res.gates);

  x = layernorm_rows(x, final_ln_gain_, final_ln_bias_);
  res.logits = matmul(x, head_);
  return res;
}

std::vector<std::pair<std::string, Tensor>> Model::backbone_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  out.emplace_back("final_ln.gain", final_ln_gain_);
  out.emplace_back("final_ln.bias", final_ln_bias_);
  out.emplace_back("head", head_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto& lw = layers_[l];
    out.emplace_back(p + "ln1.gain", lw.ln1_gain);
    out.emplace_back(p + "ln1.bias", lw.ln1_bias);
    out.emplace_back(p + "ln2.gain", lw.ln2_gain);
    out.emplace_back(p + "ln2.bias", lw.ln2_bias);
    out.emplace_back(p + "attn.wq", lw.attn.wq);
    out.emplace_back(p + "attn.wk", lw.attn.wk);
    out.emplace_back(p + "attn.wv", lw.attn.wv);
    out.emplace_back(p + "attn.wo", lw.attn.wo);
    out.emplace_back(p + "ffn.w1", lw.ffn_w1);
    out.emplace_back(p + "ffn.b1", lw.ffn_b1);
    out.emplace_back(p + "ffn.w2", lw.ffn_w2);
    out.emplace_back(p + "ffn.b2", lw.ffn_b2);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::projector_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_proj = [&](const std::string& name, std::map<int, Projector>& projs) {
    for (auto& [rate, pr] : projs) {
      const std::string p = name + std::to_string(rate) + ".";
      out.emplace_back(p + "w1", pr.w1);
      out.emplace_back(p + "b1", pr.b1);
      out.emplace_back(p + "w2", pr.w2);
      out.emplace_back(p + "b2", pr.b2);
    }
  };
  add_proj("proj.audio.", audio_projs_);
  add_proj("proj.video.", video_projs_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::adapter_params() {
  std::vector<std::pair<std::string, Tensor>> out = projector_params();
  for (std::size_t l = 0; l < mome_layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".mome.";
    auto& ml = mome_layers_[l];
    for (std::size_t e = 0; e < ml.experts.size(); ++e) {
      out.emplace_back(p + "expert" + std::to_string(e) + ".w_down", ml.experts[e].w_down);
      out.emplace_back(p + "expert" + std::to_string(e) + ".w_up", ml.experts[e].w_up);
    }
    for (std::size_t s = 0; s < ml.router.per_scale.size(); ++s)
      out.emplace_back(p + "router" + std::to_string(s), ml.router.per_scale[s]);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() {
  auto out = backbone_params();
  auto adapters = adapter_params();
  out.insert(out.end(), adapters.begin(), adapters.end());
  return out;
}

void Model::warm_start_stack_projectors() {
  if (cfg_.mode != CompressMode::kStack) return;
  auto warm = [](std::map<int, Projector>& projs) {
    const Projector& base = projs.at(1);
    const int d_in = base.w1.rows();
    for (auto& [rate, pr] : projs) {
      if (rate == 1) continue;
      for (int f = 0; f < rate; ++f)
        for (int i = 0; i < d_in; ++i)
          for (int j = 0; j < base.w1.cols(); ++j)
            pr.w1.at(f * d_in + i, j) = base.w1.at(i, j) / rate;
      pr.b1.values() = base.b1.values();
      pr.w2.values() = base.w2.values();
      pr.b2.values() = base.b2.values();
    }
  };
  warm(audio_projs_);
  warm(video_projs_);
}

void Model::set_backbone_trainable(bool trainable) {
  for (auto& [name, t] : backbone_params()) t.set_requires_grad(trainable);
}

void Model::set_adapters_trainable(bool trainable) {
  for (auto& [name, t] : adapter_params()) t.set_requires_grad(trainable);
}

std::function<std::vector<double>(const std::vector<int>&)> Model::step_fn(
    const BatchEntry& prefix, int scale_index) {
  BatchEntry base = prefix;
  return [this, base, scale_index](const std::vector<int>& generated) {
    BatchEntry e = base;
    e.target_ids = generated;
    e.layout.target_end = e.layout.target_begin + static_cast<int>(generated.size());
    auto res = forward(e, scale_index);
    const int last = res.logits.rows() - 1;
    std::vector<double> out(res.logits.cols());
    for (int c = 0; c < res.logits.cols(); ++c) out[c] = res.logits.at(last, c);
    return out;
  };
}

std::vector<int> greedy_decode(const StepFn& step, int eos_id, int max_len) {
  return beam_decode(step, eos_id, max_len, 1, 1.0);
}

std::vector<int> beam_decode(const StepFn& step, int eos_id, int max_len, int beam_width,
                             double temperature) {
  if (beam_width < 1) throw std::invalid_argument("beam_decode: beam_width must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("beam_decode: temperature must be > 0");

  struct Hyp {
    std::vector<int> ids;
    double logprob = 0.0;
    bool done = false;
  };
  std::vector<Hyp> beam{Hyp{}};

  for (int step_i = 0; step_i < max_len; ++step_i) {
    bool all_done = true;
    std::vector<Hyp> candidates;
    for (const auto& h : beam) {
      if (h.done) {
        candidates.push_back(h);
        continue;
      }
      all_done = false;
      std::vector<double> logits = step(h.ids);
      // log-softmax at the requested temperature
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double denom = 0.0;
      for (double v : logits) denom += std::exp((v - mx) / temperature);
      const double log_denom = std::log(denom);
      for (int tok = 0; tok < static_cast<int>(logits.size()); ++tok) {
        Hyp next = h;
        next.ids.push_back(tok);
        next.logprob += (logits[tok] - mx) / temperature - log_denom;
        next.done = tok == eos_id;
        candidates.push_back(std::move(next));
      }
    }
    if (all_done) break;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hyp& a, const Hyp& b) { return a.logprob > b.logprob; });
    if (static_cast<int>(candidates.size()) > beam_width) candidates.resize(beam_width);
    beam = std::move(candidates);
  }

  const Hyp* best = &beam.front();
  for (const auto& h : beam)
    if (h.logprob > best->logprob) best = &h;
  std::vector<int> out = best->ids;
  if (!out.empty() && out.back() == eos_id) out.pop_back();
  return out;
}

}  // namespace matmoe
