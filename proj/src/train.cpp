#include "matmoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace matmoe {

std::vector<int> VocabLayout::target_ids(const std::vector<int>& symbols_seq) const {
  std::vector<int> out = symbols_seq;
  out.push_back(eos());
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (lr_min > lr_max) throw std::invalid_argument("train config: lr_min > lr_max");
  grid.validate();
  scale_weights.validate();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min,
                 std::int64_t warmup) {
  if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  if (warmup > 0 && step < warmup)
    return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps <= warmup) return lr_max;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(progress * M_PI));
}

void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
                const AdamWParams& hp) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& vals = p.values();
    auto& grads = p.grad();
    auto& slot = state.slots[name];
    if (slot.m.size() != vals.size()) {
      slot.m.assign(vals.size(), 0.0);
      slot.v.assign(vals.size(), 0.0);
    }
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = grads[i];
      if (!std::isfinite(g))
        throw std::runtime_error("adamw_step: non-finite gradient in parameter '" + name + "'");
      slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * g;
      slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      vals[i] -= hp.lr * hp.weight_decay * vals[i];
      vals[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

namespace {

void clip_grads(std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& [name, p] : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& [name, p] : params)
    for (double& g : p.grad()) g *= s;
}

void zero_grads(std::vector<std::pair<std::string, Tensor>>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace

BatchEntry make_entry(const Sample& sample, const VocabLayout& vocab, const RateGrid& grid,
                      CompressMode mode, int i, int j) {
  auto batch = make_batch(sample, vocab, grid, mode);
  return batch.entry(i, j);
}

MatryoshkaBatch make_batch(const Sample& sample, const VocabLayout& vocab, const RateGrid& grid,
                           CompressMode mode) {
  TokenSequence audio{Modality::kAudio, 1, sample.audio};
  TokenSequence video{Modality::kVideo, 1, sample.video};
  return build_batch(audio, video, vocab.prompt_ids(), vocab.target_ids(sample.target), grid,
                     mode);
}

Tensor entry_nll(Model& model, const BatchEntry& entry, int scale_index,
                 std::vector<GateOutput>* gates) {
  auto res = model.forward(entry, scale_index);
  if (gates) *gates = res.gates;
  const auto& lay = entry.layout;
  // Position p predicts token p+1, so the target span is predicted from the
  // rows immediately preceding it.
  Tensor rows = slice_rows(res.logits, lay.target_begin - 1, lay.target_end - 1);
  return cross_entropy(rows, entry.target_ids);
}

TrainResult pretrain(Model& model, const TrainConfig& cfg, const std::vector<Sample>& train_set,
                     const VocabLayout& vocab) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("pretrain: empty training set");
  model.set_adapters_enabled(false);
  model.set_backbone_trainable(true);

  // Backbone plus projectors; experts and routers sit out phase 1.
  auto params = model.backbone_params();
  for (auto& p : model.projector_params()) {
    p.second.set_requires_grad(true);
    params.push_back(p);
  }
  OptimizerState opt;
  RateGrid unit_grid{{1}, {1}};

  const std::int64_t steps_per_epoch =
      (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        BatchEntry entry = make_entry(train_set[order[s]], vocab, unit_grid,
                                      model.config().mode, 0, 0);
        Tensor nll = scale(entry_nll(model, entry, 0, nullptr),
                           1.0 / static_cast<double>(end - start));
        backward(nll);
        batch_loss += nll.scalar() * (end - start);
      }
      batch_loss /= static_cast<double>(end - start);
      if (!std::isfinite(batch_loss)) throw std::runtime_error("pretrain: loss diverged");
      clip_grads(params, cfg.grad_clip);
      AdamWParams hp;
      hp.lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_steps);
      hp.weight_decay = cfg.weight_decay;
      adamw_step(params, opt, hp);
      if (step % cfg.eval_every == 0 || step + 1 == total_steps) {
        StepLog log;
        log.step = step;
        log.lr = hp.lr;
        log.report.lm_loss = batch_loss;
        log.report.total = batch_loss;
        log.report.per_scale_nll = {batch_loss};
        result.log.push_back(log);
      }
      result.final_loss = batch_loss;
      ++step;
    }
  }
  return result;
}

TrainResult train_adapters(Model& model, const TrainConfig& cfg,
                           const std::vector<Sample>& train_set, const VocabLayout& vocab) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train_adapters: empty training set");
  const int g = static_cast<int>(cfg.grid.audio_rates.size());
  const int l = static_cast<int>(cfg.grid.video_rates.size());
  if (cfg.scale_weights.g != g || cfg.scale_weights.l != l)
    throw std::invalid_argument("train_adapters: scale weights do not match the grid");

  model.set_adapters_enabled(true);
  model.set_backbone_trainable(false);
  model.set_adapters_trainable(true);
  model.warm_start_stack_projectors();

  auto frozen = model.backbone_params();
  const std::uint64_t frozen_hash_before = params_hash(frozen);

  auto params = model.adapter_params();
  OptimizerState opt;

  const std::int64_t steps_per_epoch =
      (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  const int n_routed = model.config().mome.n_routed;
  const bool over_k = model.config().mome.balance_fraction_over_k;

  TrainResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(params);
      LossReport report;
      report.per_scale_nll.assign(static_cast<std::size_t>(g) * l, 0.0);
      for (std::size_t s = start; s < end; ++s) {
        auto batch = make_batch(train_set[order[s]], vocab, cfg.grid, model.config().mode);
        std::vector<Tensor> nlls;
        std::vector<Tensor> balances;
        // Deterministic reduction in row-major (i, j) order.
        for (int i = 0; i < g; ++i)
          for (int j = 0; j < l; ++j) {
            const int scale_index = i * l + j;
            std::vector<GateOutput> gates;
            Tensor nll = entry_nll(model, batch.entry(i, j), scale_index, &gates);
            nlls.push_back(nll);
            report.per_scale_nll[scale_index] += nll.scalar();
            if (n_routed > 0 && cfg.balance_coeff != 0.0) {
              for (const auto& gate : gates) {
                LoadBalanceStats stats;
                stats.accumulate(gate);
                balances.push_back(
                    load_balance_loss_tensor(gate.scores, stats, n_routed, over_k));
              }
            }
          }
        Tensor lm = matryoshka_lm_loss(nlls, cfg.scale_weights);
        Tensor loss = lm;
        if (!balances.empty()) {
          Tensor acc;
          double balance_sum = 0.0;
          for (const auto& b : balances) {
            balance_sum += b.scalar();
            acc = acc.defined() ? add(acc, b) : b;
          }
          loss = add(lm, scale(acc, cfg.balance_coeff / static_cast<double>(balances.size())));
          report.mean_balance += balance_sum / static_cast<double>(balances.size());
        }
        report.lm_loss += lm.scalar();
        report.total += loss.scalar();
        Tensor scaled = scale(loss, 1.0 / static_cast<double>(end - start));
        backward(scaled);
      }
      const double inv_bs = 1.0 / static_cast<double>(end - start);
      report.lm_loss *= inv_bs;
      report.total *= inv_bs;
      report.mean_balance *= inv_bs;
      for (auto& v : report.per_scale_nll) v *= inv_bs;
      if (!std::isfinite(report.total)) throw std::runtime_error("train_adapters: loss diverged");
      clip_grads(params, cfg.grad_clip);
      AdamWParams hp;
      hp.lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_steps);
      hp.weight_decay = cfg.weight_decay;
      adamw_step(params, opt, hp);
      if (step % cfg.eval_every == 0 || step + 1 == total_steps) {
        StepLog log;
        log.step = step;
        log.lr = hp.lr;
        log.report = report;
        result.log.push_back(log);
      }
      result.final_loss = report.total;
      ++step;
    }
  }

  if (params_hash(model.backbone_params()) != frozen_hash_before)
    throw std::runtime_error("train_adapters: frozen backbone weights changed");
  return result;
}

EvalMetrics evaluate(Model& model, const std::vector<Sample>& eval_set, const VocabLayout& vocab,
                     int audio_rate, int video_rate, int scale_index) {
  if (scale_index < 0) {
    const auto& grid = model.config().grid;
    auto ai = std::find(grid.audio_rates.begin(), grid.audio_rates.end(), audio_rate);
    auto vj = std::find(grid.video_rates.begin(), grid.video_rates.end(), video_rate);
    if (ai != grid.audio_rates.end() && vj != grid.video_rates.end()) {
      scale_index = static_cast<int>(ai - grid.audio_rates.begin()) *
                        static_cast<int>(grid.video_rates.size()) +
                    static_cast<int>(vj - grid.video_rates.begin());
    } else {
      scale_index = 0;  // out-of-grid pair: shared-router models ignore this
    }
  }

  RateGrid grid{{audio_rate}, {video_rate}};
  EvalMetrics metrics;
  double edit_total = 0.0, ref_total = 0.0;
  double correct = 0.0, tokens = 0.0, nll_total = 0.0;
  for (const auto& sample : eval_set) {
    BatchEntry entry = make_entry(sample, vocab, grid, model.config().mode, 0, 0);

    // Teacher-forced accuracy and NLL.
    auto res = model.forward(entry, scale_index);
    const auto& lay = entry.layout;
    for (int t = 0; t < static_cast<int>(entry.target_ids.size()); ++t) {
      const int row = lay.target_begin - 1 + t;
      int argmax = 0;
      for (int c = 1; c < res.logits.cols(); ++c)
        if (res.logits.at(row, c) > res.logits.at(row, argmax)) argmax = c;
      if (argmax == entry.target_ids[t]) correct += 1.0;
      tokens += 1.0;
    }
    Tensor rows = slice_rows(res.logits, lay.target_begin - 1, lay.target_end - 1);
    nll_total += cross_entropy(rows, entry.target_ids).scalar();

    // Greedy decode for the error rate.
    BatchEntry prefix = entry;
    prefix.target_ids.clear();
    prefix.layout.target_end = prefix.layout.target_begin;
    auto step = model.step_fn(prefix, scale_index);
    auto decoded = greedy_decode(step, vocab.eos(), static_cast<int>(sample.target.size()) + 8);
    edit_total += levenshtein(decoded, sample.target);
    ref_total += static_cast<double>(sample.target.size());
    ++metrics.samples;
  }
  metrics.symbol_error_rate = ref_total > 0 ? edit_total / ref_total : 0.0;
  metrics.token_accuracy = tokens > 0 ? correct / tokens : 0.0;
  metrics.mean_nll = metrics.samples > 0 ? nll_total / metrics.samples : 0.0;
  return metrics;
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

std::uint64_t params_hash(const std::vector<std::pair<std::string, Tensor>>& params) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.values().data(), t.values().size() * sizeof(double));
  }
  return h;
}

}  // namespace matmoe
