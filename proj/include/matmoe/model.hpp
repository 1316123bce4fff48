#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "matmoe/matryoshka.hpp"
#include "matmoe/moe.hpp"
#include "matmoe/tensor.hpp"

namespace matmoe {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_hidden = 128;
  int vocab_size = 35;  // includes the special tokens
  int max_seq_len = 640;
  int d_audio_in = 32;
  int d_video_in = 32;
  int proj_hidden = 64;
  CompressMode mode = CompressMode::kAverage;
  RateGrid grid{{4, 16}, {2, 5}};
  MoMEConfig mome;

  void validate() const;
};

// Two linear layers with ReLU in between; maps modality features to d_model.
struct Projector {
  Tensor w1, b1;  // [d_in, hidden], [1, hidden]
  Tensor w2, b2;  // [hidden, d_model], [1, d_model]
};

Projector make_projector(int d_in, int hidden, int d_model, std::mt19937_64& rng);
Tensor projector_forward(const Projector& p, const Tensor& tokens);

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // all [d_model, d_model]
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct MoMELayer {
  std::vector<Expert> experts;  // N_s shared first, then N_r routed
  RouterWeights router;
};

struct ForwardResult {
  Tensor logits;                  // [T, vocab]
  std::vector<GateOutput> gates;  // one per layer when the adapter path ran
};

// Decoder-only pre-LN transformer with a parallel expert-adapter branch per
// layer. The backbone (embeddings, attention, FFN, norms, head) is the
// frozen partition; projectors, experts and routers are the trainable one.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // When disabled, the adapter branch is skipped entirely. At zero expert
  // init the two paths produce bit-identical logits.
  void set_adapters_enabled(bool enabled) { adapters_enabled_ = enabled; }
  bool adapters_enabled() const { return adapters_enabled_; }

  // Marks backbone tensors trainable/frozen for the coming phase.
  void set_backbone_trainable(bool trainable);
  void set_adapters_trainable(bool trainable);

  // In stack mode, re-initializes every rate-r projector from the rate-1
  // projector (w1 tiled over the r stacked frames and divided by r), so a
  // stacked window initially maps to exactly what its average-pooled window
  // would. Adapter training then refines each rate independently from that
  // anchor instead of from random weights. No-op in average mode.
  void warm_start_stack_projectors();

  ForwardResult forward(const BatchEntry& entry, int scale_index);

  // Projected AV tokens as they enter the transformer (the analysis
  // measurement site).
  Tensor project_tokens(const Tensor& features, Modality modality, int rate) const;

  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<std::pair<std::string, Tensor>> backbone_params();
  std::vector<std::pair<std::string, Tensor>> adapter_params();
  std::vector<std::pair<std::string, Tensor>> projector_params();

  // Next-token logits callback over a growing generated suffix; used by the
  // decoders and evaluation.
  std::function<std::vector<double>(const std::vector<int>&)> step_fn(const BatchEntry& prefix,
                                                                      int scale_index);

 private:
  Tensor layer_forward(const Tensor& z, int layer, int scale_index,
                       std::vector<GateOutput>* gates);
  Tensor attention(const Tensor& x, int layer);
  Tensor ffn(const Tensor& x, int layer);
  const Projector& projector_for(Modality modality, int rate) const;

  ModelConfig cfg_;
  bool adapters_enabled_ = false;

  Tensor tok_emb_;   // [vocab, d_model]
  Tensor pos_emb_;   // [max_seq_len, d_model]
  Tensor final_ln_gain_, final_ln_bias_;
  Tensor head_;      // [d_model, vocab]
  std::vector<LayerWeights> layers_;
  std::vector<MoMELayer> mome_layers_;
  // Keyed by compression rate; average mode stores a single rate-independent
  // projector under key 0.
  std::map<int, Projector> audio_projs_;
  std::map<int, Projector> video_projs_;
};

// Decoding over an abstract next-token logits function so the search is
// testable against hand-built distributions.
using StepFn = std::function<std::vector<double>(const std::vector<int>&)>;

std::vector<int> greedy_decode(const StepFn& step, int eos_id, int max_len);
std::vector<int> beam_decode(const StepFn& step, int eos_id, int max_len, int beam_width,
                             double temperature);

}  // namespace matmoe
