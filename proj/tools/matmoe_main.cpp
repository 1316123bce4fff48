// matmoe: reproducible experiment driver.
//
// Subcommands: gendata, pretrain, train, eval, analyze, ablate.
// Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "matmoe/analysis.hpp"
#include "matmoe/config.hpp"
#include "matmoe/serialize.hpp"
#include "matmoe/train.hpp"

namespace fs = std::filesystem;
using namespace matmoe;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string rates;
  int device_threads = 1;
  bool deterministic = false;
};

ExperimentConfig resolve_config(const Options& opt) {
  ExperimentConfig cfg;
  if (!opt.config_path.empty()) {
    if (!fs::exists(opt.config_path))
      throw MissingInput("config file '" + opt.config_path + "' not found");
    try {
      cfg = load_config(opt.config_path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else {
    cfg = default_config();
  }
  if (opt.seed_set) {
    cfg.seed = opt.seed;
    cfg.synth.seed = opt.seed;
    cfg.pretrain.seed = opt.seed;
    cfg.adapters.seed = opt.seed;
  }
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  cfg.normalize();
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::pair<int, int> parse_rates(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("--rates expects A,V");
  try {
    const int a = std::stoi(text.substr(0, comma));
    const int v = std::stoi(text.substr(comma + 1));
    if (a < 1 || v < 1) throw ConfigError("rates must be >= 1");
    return {a, v};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("--rates expects two integers, got '" + text + "'");
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string data_dir(const ExperimentConfig& cfg) { return cfg.output_dir + "/data"; }
std::string backbone_path(const ExperimentConfig& cfg) { return cfg.output_dir + "/backbone.ckpt"; }
std::string adapters_path(const ExperimentConfig& cfg) { return cfg.output_dir + "/adapters.ckpt"; }

DatasetSplits require_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(data_dir(cfg) + "/manifest.json"))
    throw MissingInput("dataset not found at '" + data_dir(cfg) + "'; run gendata first");
  return load_dataset(data_dir(cfg), cfg);
}

Checkpoint require_checkpoint(const std::string& path, const ExperimentConfig& cfg) {
  if (!fs::exists(path)) throw MissingInput("checkpoint '" + path + "' not found");
  Checkpoint ckpt = load_checkpoint(path);
  try {
    check_config_matches(ckpt, cfg);
  } catch (const std::exception& e) {
    throw ConfigError(std::string(e.what()) + " ('" + path + "')");
  }
  return ckpt;
}

void write_loss_log(const std::string& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "step,lr,lm_loss,mean_balance,total\n";
  for (const auto& s : result.log)
    out << s.step << "," << fmt(s.lr) << "," << fmt(s.report.lm_loss) << ","
        << fmt(s.report.mean_balance) << "," << fmt(s.report.total) << "\n";
}

int cmd_gendata(const ExperimentConfig& cfg) {
  DatasetSplits splits = generate_splits(cfg);
  save_dataset(data_dir(cfg), cfg, splits);
  std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/"
            << splits.test.size() << " samples to " << data_dir(cfg) << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  DatasetSplits splits = require_dataset(cfg);
  Model model(cfg.model, cfg.seed);
  VocabLayout vocab{cfg.synth.vocab_size};
  TrainConfig tc = cfg.pretrain;
  tc.phase = TrainPhase::kPretrain;
  TrainResult result = pretrain(model, tc, splits.train, vocab);
  fs::create_directories(cfg.output_dir);
  save_checkpoint(backbone_path(cfg),
                  checkpoint_from_model(model, cfg, static_cast<std::int64_t>(result.log.size())));
  write_loss_log(cfg.output_dir + "/pretrain_log.csv", result);
  std::cout << "pretrain final loss " << fmt(result.final_loss) << " -> " << backbone_path(cfg)
            << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  DatasetSplits splits = require_dataset(cfg);
  Checkpoint ckpt = require_checkpoint(backbone_path(cfg), cfg);
  auto model = model_from_checkpoint(ckpt, nullptr);
  VocabLayout vocab{cfg.synth.vocab_size};
  TrainConfig tc = cfg.adapters;
  tc.phase = TrainPhase::kAdapters;
  TrainResult result = train_adapters(*model, tc, splits.train, vocab);
  save_checkpoint(adapters_path(cfg),
                  checkpoint_from_model(*model, cfg, static_cast<std::int64_t>(result.log.size())));
  write_loss_log(cfg.output_dir + "/train_log.csv", result);
  std::cout << "adapter training final loss " << fmt(result.final_loss) << " -> "
            << adapters_path(cfg) << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& rates, bool use_backbone,
             const std::string& split) {
  DatasetSplits splits = require_dataset(cfg);
  const std::vector<Sample>& eval_set =
      split == "val" ? splits.val : (split == "train" ? splits.train : splits.test);
  const std::string ckpt_path = use_backbone ? backbone_path(cfg) : adapters_path(cfg);
  Checkpoint ckpt = require_checkpoint(ckpt_path, cfg);
  auto model = model_from_checkpoint(ckpt, nullptr);
  model->set_adapters_enabled(!use_backbone);
  VocabLayout vocab{cfg.synth.vocab_size};

  std::vector<std::pair<int, int>> pairs;
  if (!rates.empty()) {
    auto [a, v] = parse_rates(rates);
    bool in_grid = false;
    for (int ga : cfg.model.grid.audio_rates)
      for (int gv : cfg.model.grid.video_rates)
        if (ga == a && gv == v) in_grid = true;
    if (!in_grid && !use_backbone && !cfg.model.mome.shared_router)
      throw ConfigError("rate pair (" + std::to_string(a) + "," + std::to_string(v) +
                        ") is outside the grid and the model uses disjoint routers");
    pairs.emplace_back(a, v);
  } else {
    for (int a : cfg.model.grid.audio_rates)
      for (int v : cfg.model.grid.video_rates) pairs.emplace_back(a, v);
  }

  std::ofstream csv(cfg.output_dir + "/eval.csv");
  if (!csv) throw std::runtime_error("cannot write '" + cfg.output_dir + "/eval.csv'");
  csv << "audio_rate,video_rate,ser,token_accuracy,mean_nll,samples\n";
  std::cout << "rate      SER       token_acc  mean_nll\n";
  for (auto [a, v] : pairs) {
    EvalMetrics m = evaluate(*model, eval_set, vocab, a, v);
    csv << a << "," << v << "," << fmt(m.symbol_error_rate) << "," << fmt(m.token_accuracy) << ","
        << fmt(m.mean_nll) << "," << m.samples << "\n";
    std::printf("(%2d,%2d)  %8.4f  %8.4f  %9.4f\n", a, v, m.symbol_error_rate, m.token_accuracy,
                m.mean_nll);
  }
  return 0;
}

int cmd_analyze(const ExperimentConfig& cfg, int t_audio, int t_video) {
  DatasetSplits splits = require_dataset(cfg);
  Checkpoint ckpt = require_checkpoint(adapters_path(cfg), cfg);
  auto model = model_from_checkpoint(ckpt, nullptr);
  model->set_adapters_enabled(true);
  VocabLayout vocab{cfg.synth.vocab_size};
  const RateGrid& grid = cfg.model.grid;

  ActivationHistogram hist = expert_activation_stats(*model, splits.test, vocab, grid);
  {
    std::ofstream out(cfg.output_dir + "/activation_hist.csv");
    out << "layer,scale,expert,count,frequency\n";
    for (int l = 0; l < hist.n_layers; ++l)
      for (int s = 0; s < hist.n_scales; ++s) {
        auto freq = hist.frequencies(l, s);
        for (int e = 0; e < hist.n_experts; ++e)
          out << l << "," << s << "," << e << "," << hist.counts[l][s][e] << "," << fmt(freq[e])
              << "\n";
      }
  }
  {
    auto overlap = cross_scale_overlap(hist, cfg.model.mome.top_k);
    std::ofstream out(cfg.output_dir + "/overlap.csv");
    out << "layer,mean_jaccard\n";
    for (std::size_t l = 0; l < overlap.size(); ++l) out << l << "," << fmt(overlap[l]) << "\n";
  }
  if (!splits.test.empty()) {
    // Fine-vs-coarse cosine maps at the post-projector site, audio stream.
    const Sample& s = splits.test.front();
    Tensor fine = model->project_tokens(s.audio, Modality::kAudio, 1);
    for (int r : grid.audio_rates) {
      TokenSequence raw{Modality::kAudio, 1, s.audio};
      TokenSequence pooled = (cfg.model.mode == CompressMode::kAverage)
                                 ? compress_avg(raw, r)
                                 : compress_stack(raw, r);
      Tensor coarse = model->project_tokens(pooled.tokens, Modality::kAudio, r);
      SimilarityMatrix sim = similarity_matrix(coarse, fine);
      std::ofstream out(cfg.output_dir + "/similarity_a" + std::to_string(r) + ".csv");
      for (int i = 0; i < sim.rows; ++i)
        for (int j = 0; j < sim.cols; ++j)
          out << fmt(sim.at(i, j)) << (j + 1 == sim.cols ? "\n" : ",");
    }
  }
  {
    auto rows = cost_report(cfg.model, t_audio, t_video, grid);
    nlohmann::json report = nlohmann::json::array();
    for (const auto& r : rows)
      report.push_back({{"audio_rate", r.audio_rate},
                        {"video_rate", r.video_rate},
                        {"audio_tokens", r.audio_tokens},
                        {"video_tokens", r.video_tokens},
                        {"total_tokens", r.total_tokens},
                        {"flops", r.flops},
                        {"active_params", r.active_params}});
    std::ofstream out(cfg.output_dir + "/cost_report.json");
    out << report.dump(2) << "\n";
  }
  std::cout << "analysis artifacts written to " << cfg.output_dir << "\n";
  return 0;
}

void apply_ablation(ExperimentConfig& cfg, const std::string& dim, const std::string& value) {
  try {
    if (dim == "placement") {
      cfg.model.mome.placement = placement_from_name(value);
    } else if (dim == "top_k") {
      cfg.model.mome.top_k = std::stoi(value);
    } else if (dim == "n_routed") {
      cfg.model.mome.n_routed = std::stoi(value);
    } else if (dim == "shared_router") {
      if (value != "true" && value != "false")
        throw std::invalid_argument("shared_router expects true|false");
      cfg.model.mome.shared_router = value == "true";
    } else if (dim == "scale_weights") {
      if (value == "uniform") {
        cfg.adapters.scale_weights = ScaleWeights::uniform(
            static_cast<int>(cfg.model.grid.audio_rates.size()),
            static_cast<int>(cfg.model.grid.video_rates.size()));
      } else {
        // colon-separated row-major weights, e.g. 1:1:1:2
        ScaleWeights w;
        w.g = static_cast<int>(cfg.model.grid.audio_rates.size());
        w.l = static_cast<int>(cfg.model.grid.video_rates.size());
        std::stringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ':')) w.c.push_back(std::stod(tok));
        w.validate();
        if (static_cast<int>(w.c.size()) != w.g * w.l)
          throw std::invalid_argument("scale_weights needs G*L values");
        cfg.adapters.scale_weights = w;
      }
    } else {
      throw std::invalid_argument("unknown ablation dimension '" + dim + "'");
    }
    cfg.normalize();
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

int cmd_ablate(const ExperimentConfig& base, const std::string& dim,
               const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("--values must list at least one setting");
  // Shared data and shared backbone across runs; only the adapter phase varies.
  if (!fs::exists(data_dir(base) + "/manifest.json")) cmd_gendata(base);
  if (!fs::exists(backbone_path(base))) cmd_pretrain(base);
  DatasetSplits splits = require_dataset(base);
  Checkpoint backbone = require_checkpoint(backbone_path(base), base);
  VocabLayout vocab{base.synth.vocab_size};

  std::ofstream csv(base.output_dir + "/ablate_report.csv");
  if (!csv) throw std::runtime_error("cannot write ablation report");
  csv << "value";
  for (int a : base.model.grid.audio_rates)
    for (int v : base.model.grid.video_rates) csv << ",ser_" << a << "_" << v;
  if (dim == "shared_router") csv << ",mean_overlap";
  csv << "\n";

  for (const auto& value : values) {
    ExperimentConfig cfg = base;
    apply_ablation(cfg, dim, value);
    cfg.output_dir = base.output_dir + "/ablate_" + dim + "_" + value;
    fs::create_directories(cfg.output_dir);

    auto model = std::make_unique<Model>(cfg.model, cfg.seed);
    // Reuse the shared backbone weights; adapter tensors keep their fresh init.
    {
      auto params = model->named_params();
      for (auto& [name, t] : params)
        for (const auto& [sname, st] : backbone.tensors)
          if (sname == name && st.rows() == t.rows() && st.cols() == t.cols() &&
              (name.find("mome") == std::string::npos)) {
            t.values() = st.values();
            break;
          }
    }
    TrainConfig tc = cfg.adapters;
    tc.phase = TrainPhase::kAdapters;
    TrainResult result = train_adapters(*model, tc, splits.train, vocab);
    save_checkpoint(cfg.output_dir + "/adapters.ckpt",
                    checkpoint_from_model(*model, cfg,
                                          static_cast<std::int64_t>(result.log.size())));
    write_loss_log(cfg.output_dir + "/train_log.csv", result);

    csv << value;
    std::cout << dim << "=" << value;
    for (int a : cfg.model.grid.audio_rates)
      for (int v : cfg.model.grid.video_rates) {
        EvalMetrics m = evaluate(*model, splits.test, vocab, a, v);
        csv << "," << fmt(m.symbol_error_rate);
        std::printf("  (%d,%d)=%.4f", a, v, m.symbol_error_rate);
      }
    if (dim == "shared_router") {
      ActivationHistogram hist =
          expert_activation_stats(*model, splits.test, vocab, cfg.model.grid);
      auto overlap = cross_scale_overlap(hist, cfg.model.mome.top_k);
      double mean = 0.0;
      for (double o : overlap) mean += o;
      if (!overlap.empty()) mean /= static_cast<double>(overlap.size());
      csv << "," << fmt(mean);
      std::printf("  overlap=%.4f", mean);
    }
    csv << "\n";
    std::cout << "\n";
  }
  std::cout << "ablation report -> " << base.output_dir << "/ablate_report.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"matmoe: multi-granularity expert-adapter laboratory"};
  app.require_subcommand(1);

  Options opt;
  app.add_option("--config", opt.config_path, "experiment config (JSON)");
  app.add_option("--seed", opt.seed, "override all config seeds")
      ->each([&opt](const std::string&) { opt.seed_set = true; });
  app.add_option("--out", opt.out, "override output directory");
  app.add_option("--device-threads", opt.device_threads, "math library thread cap");
  app.add_flag("--deterministic", opt.deterministic, "force single-threaded numeric paths");

  auto* gendata = app.add_subcommand("gendata", "generate train/val/test splits");
  auto* pre = app.add_subcommand("pretrain", "train backbone + projectors at rate (1,1)");
  auto* train = app.add_subcommand("train", "train adapters on the frozen backbone");

  auto* eval = app.add_subcommand("eval", "per-rate metric table on held-out data");
  bool use_backbone = false;
  std::string split = "test";
  eval->add_option("--rates", opt.rates, "restrict to one pair A,V");
  eval->add_flag("--backbone", use_backbone, "evaluate the pretrained backbone, adapters off");
  eval->add_option("--split", split, "train|val|test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* analyze = app.add_subcommand("analyze", "expert usage, similarity and cost artifacts");
  int t_audio = 1106, t_video = 567;
  analyze->add_option("--t-audio", t_audio, "uncompressed audio stream length");
  analyze->add_option("--t-video", t_video, "uncompressed video stream length");

  auto* ablate = app.add_subcommand("ablate", "sweep one dimension with shared data/backbone");
  std::string dimension;
  std::vector<std::string> values;
  ablate->add_option("--dimension", dimension,
                     "placement|top_k|n_routed|shared_router|scale_weights")
      ->required();
  ablate->add_option("--values", values, "comma-separated settings")
      ->required()
      ->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    Eigen::setNbThreads(opt.deterministic ? 1 : std::max(1, opt.device_threads));
    ExperimentConfig cfg = resolve_config(opt);
    fs::create_directories(cfg.output_dir);
    if (gendata->parsed()) return cmd_gendata(cfg);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, opt.rates, use_backbone, split);
    if (analyze->parsed()) return cmd_analyze(cfg, t_audio, t_video);
    if (ablate->parsed()) return cmd_ablate(cfg, dimension, values);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingInput& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
