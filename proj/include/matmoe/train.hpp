#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "matmoe/model.hpp"
#include "matmoe/objective.hpp"
#include "matmoe/synthdata.hpp"

namespace matmoe {

// Token id layout: synthetic symbols first, then the specials.
struct VocabLayout {
  int symbols = 32;

  int bos() const { return symbols; }
  int eos() const { return symbols + 1; }
  int prompt() const { return symbols + 2; }
  int total() const { return symbols + 3; }

  std::vector<int> prompt_ids() const { return {prompt(), bos()}; }
  std::vector<int> target_ids(const std::vector<int>& symbols_seq) const;
};

enum class TrainPhase { kPretrain, kAdapters };

struct TrainConfig {
  TrainPhase phase = TrainPhase::kAdapters;
  int epochs = 10;
  int batch_size = 8;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.1;
  int warmup_steps = 50;
  double grad_clip = 1.0;  // <= 0 disables
  RateGrid grid{{4, 16}, {2, 5}};
  ScaleWeights scale_weights = ScaleWeights::uniform(2, 2);
  std::uint64_t seed = 1;
  int eval_every = 50;
  double balance_coeff = kBalanceLossScale;  // 0 disables the auxiliary loss

  void validate() const;
};

// First/second moment accumulators for the trainable parameters only.
struct OptimizerState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::unordered_map<std::string, Slot> slots;
  std::int64_t step = 0;
};

struct AdamWParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight-decay Adam update over named parameters; grads are read
// from each tensor's accumulated gradient. Throws on non-finite gradients,
// naming the offending parameter.
void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
                const AdamWParams& hp);

// Linear warmup to lr_max, then cosine decay to lr_min.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min,
                 std::int64_t warmup);

struct StepLog {
  std::int64_t step = 0;
  double lr = 0.0;
  LossReport report;
};

struct TrainResult {
  std::vector<StepLog> log;
  double final_loss = 0.0;
};

BatchEntry make_entry(const Sample& sample, const VocabLayout& vocab, const RateGrid& grid,
                      CompressMode mode, int i, int j);
MatryoshkaBatch make_batch(const Sample& sample, const VocabLayout& vocab, const RateGrid& grid,
                           CompressMode mode);

// Mean NLL of the target segment for one assembled entry; gates from the
// forward pass are returned through *gates when requested.
Tensor entry_nll(Model& model, const BatchEntry& entry, int scale_index,
                 std::vector<GateOutput>* gates);

// Phase 1: trains the full backbone + projectors on rate-(1,1) sequences.
TrainResult pretrain(Model& model, const TrainConfig& cfg, const std::vector<Sample>& train_set,
                     const VocabLayout& vocab);

// Phase 2: frozen backbone; each step sees all G*L scales of its samples and
// updates only projectors, experts and routers. Aborts if the frozen
// partition hash changes.
TrainResult train_adapters(Model& model, const TrainConfig& cfg,
                           const std::vector<Sample>& train_set, const VocabLayout& vocab);

struct EvalMetrics {
  double symbol_error_rate = 0.0;
  double token_accuracy = 0.0;  // teacher-forced argmax accuracy
  double mean_nll = 0.0;
  int samples = 0;
};

// Greedy decoding on held-out samples at one rate pair. scale_index selects
// the disjoint router when applicable; pass -1 to derive it from the grid.
EvalMetrics evaluate(Model& model, const std::vector<Sample>& eval_set, const VocabLayout& vocab,
                     int audio_rate, int video_rate, int scale_index = -1);

int levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// FNV-1a over the raw bytes of the given parameter set, in name order.
std::uint64_t params_hash(const std::vector<std::pair<std::string, Tensor>>& params);

}  // namespace matmoe
