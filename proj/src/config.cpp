#include "matmoe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace matmoe {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

json grid_to_json(const RateGrid& g) {
  return json{{"audio_rates", g.audio_rates}, {"video_rates", g.video_rates}};
}

RateGrid grid_from_json(const json& j) {
  check_keys(j, {"audio_rates", "video_rates"}, "grid");
  RateGrid g;
  g.audio_rates = j.at("audio_rates").get<std::vector<int>>();
  g.video_rates = j.at("video_rates").get<std::vector<int>>();
  g.validate();
  return g;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  synth.validate();
  pretrain.validate();
  adapters.validate();
  if (train_samples < 1 || val_samples < 1 || test_samples < 1)
    throw std::invalid_argument("config: split sizes must be positive");
}

void ExperimentConfig::normalize() {
  adapters.grid = model.grid;
  const int g = static_cast<int>(model.grid.audio_rates.size());
  const int l = static_cast<int>(model.grid.video_rates.size());
  if (adapters.scale_weights.g != g || adapters.scale_weights.l != l)
    adapters.scale_weights = ScaleWeights::uniform(g, l);
  pretrain.phase = TrainPhase::kPretrain;
  adapters.phase = TrainPhase::kAdapters;
  model.vocab_size = VocabLayout{synth.vocab_size}.total();
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.model.grid = RateGrid{{4, 16}, {2, 5}};
  cfg.model.mome.bottleneck = 32;
  cfg.train_samples = 768;
  cfg.pretrain.phase = TrainPhase::kPretrain;
  cfg.pretrain.epochs = 6;
  cfg.pretrain.batch_size = 8;
  cfg.pretrain.lr_max = 3e-3;
  cfg.pretrain.warmup_steps = 100;
  cfg.adapters.phase = TrainPhase::kAdapters;
  cfg.adapters.epochs = 10;
  cfg.adapters.batch_size = 4;
  cfg.adapters.lr_max = 3e-3;
  cfg.adapters.warmup_steps = 100;
  // Coarse scales carry less signal per token; weight them up so the single
  // shared adapter stack does not optimize for the easy fine scales only.
  cfg.adapters.scale_weights = ScaleWeights{2, 2, {1.0, 1.0, 2.0, 2.0}};
  cfg.normalize();
  return cfg;
}

namespace {

json train_to_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr_max", t.lr_max},
              {"lr_min", t.lr_min},
              {"weight_decay", t.weight_decay},
              {"warmup_steps", t.warmup_steps},
              {"grad_clip", t.grad_clip},
              {"seed", t.seed},
              {"eval_every", t.eval_every},
              {"balance_coeff", t.balance_coeff},
              {"scale_weights", t.scale_weights.c}};
}

void train_from_json(const json& j, TrainConfig& t, const std::string& where) {
  check_keys(j,
             {"epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "warmup_steps",
              "grad_clip", "seed", "eval_every", "balance_coeff", "scale_weights"},
             where);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr_max = j.value("lr_max", t.lr_max);
  t.lr_min = j.value("lr_min", t.lr_min);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.seed = j.value("seed", t.seed);
  t.eval_every = j.value("eval_every", t.eval_every);
  t.balance_coeff = j.value("balance_coeff", t.balance_coeff);
  if (j.count("scale_weights")) {
    t.scale_weights.c = j.at("scale_weights").get<std::vector<double>>();
  }
}

}  // namespace

std::string to_json(const ExperimentConfig& cfg) {
  json j;
  j["model"] = json{{"d_model", cfg.model.d_model},
                    {"n_layers", cfg.model.n_layers},
                    {"n_heads", cfg.model.n_heads},
                    {"ffn_hidden", cfg.model.ffn_hidden},
                    {"max_seq_len", cfg.model.max_seq_len},
                    {"proj_hidden", cfg.model.proj_hidden},
                    {"compress_mode",
                     cfg.model.mode == CompressMode::kAverage ? "avg" : "stack"}};
  j["mome"] = json{{"n_routed", cfg.model.mome.n_routed},
                   {"n_shared", cfg.model.mome.n_shared},
                   {"top_k", cfg.model.mome.top_k},
                   {"bottleneck", cfg.model.mome.bottleneck},
                   {"placement", placement_name(cfg.model.mome.placement)},
                   {"shared_router", cfg.model.mome.shared_router},
                   {"balance_fraction_over_k", cfg.model.mome.balance_fraction_over_k}};
  j["grid"] = grid_to_json(cfg.model.grid);
  j["synth"] = json{{"vocab_size", cfg.synth.vocab_size},
                    {"target_len_min", cfg.synth.target_len_min},
                    {"target_len_max", cfg.synth.target_len_max},
                    {"audio_repeat", cfg.synth.audio_repeat},
                    {"video_repeat", cfg.synth.video_repeat},
                    {"d_audio", cfg.synth.d_audio},
                    {"d_video", cfg.synth.d_video},
                    {"noise_sigma", cfg.synth.noise_sigma},
                    {"stream_drop_prob", cfg.synth.stream_drop_prob},
                    {"seed", cfg.synth.seed}};
  j["pretrain"] = train_to_json(cfg.pretrain);
  j["adapters"] = train_to_json(cfg.adapters);
  j["train_samples"] = cfg.train_samples;
  j["val_samples"] = cfg.val_samples;
  j["test_samples"] = cfg.test_samples;
  // output_dir is deliberately not serialized: it is a runtime location, not
  // part of the experiment's identity, and embedding it would make otherwise
  // identical runs produce different checkpoints in different directories.
  j["seed"] = cfg.seed;
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: parse error: ") + e.what());
  }
  check_keys(j,
             {"model", "mome", "grid", "synth", "pretrain", "adapters", "train_samples",
              "val_samples", "test_samples", "output_dir", "seed"},
             "top level");

  ExperimentConfig cfg = default_config();
  if (j.count("model")) {
    const auto& m = j["model"];
    check_keys(m,
               {"d_model", "n_layers", "n_heads", "ffn_hidden", "max_seq_len", "proj_hidden",
                "compress_mode"},
               "model");
    cfg.model.d_model = m.value("d_model", cfg.model.d_model);
    cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
    cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
    cfg.model.ffn_hidden = m.value("ffn_hidden", cfg.model.ffn_hidden);
    cfg.model.max_seq_len = m.value("max_seq_len", cfg.model.max_seq_len);
    cfg.model.proj_hidden = m.value("proj_hidden", cfg.model.proj_hidden);
    const std::string mode = m.value("compress_mode", "avg");
    if (mode == "avg")
      cfg.model.mode = CompressMode::kAverage;
    else if (mode == "stack")
      cfg.model.mode = CompressMode::kStack;
    else
      throw std::invalid_argument("config: compress_mode must be 'avg' or 'stack'");
  }
  if (j.count("mome")) {
    const auto& m = j["mome"];
    check_keys(m,
               {"n_routed", "n_shared", "top_k", "bottleneck", "placement", "shared_router",
                "balance_fraction_over_k"},
               "mome");
    cfg.model.mome.n_routed = m.value("n_routed", cfg.model.mome.n_routed);
    cfg.model.mome.n_shared = m.value("n_shared", cfg.model.mome.n_shared);
    cfg.model.mome.top_k = m.value("top_k", cfg.model.mome.top_k);
    cfg.model.mome.bottleneck = m.value("bottleneck", cfg.model.mome.bottleneck);
    if (m.count("placement"))
      cfg.model.mome.placement = placement_from_name(m["placement"].get<std::string>());
    cfg.model.mome.shared_router = m.value("shared_router", cfg.model.mome.shared_router);
    cfg.model.mome.balance_fraction_over_k =
        m.value("balance_fraction_over_k", cfg.model.mome.balance_fraction_over_k);
  }
  if (j.count("grid")) cfg.model.grid = grid_from_json(j["grid"]);
  if (j.count("synth")) {
    const auto& s = j["synth"];
    check_keys(s,
               {"vocab_size", "target_len_min", "target_len_max", "audio_repeat", "video_repeat",
                "d_audio", "d_video", "noise_sigma", "stream_drop_prob", "seed"},
               "synth");
    cfg.synth.vocab_size = s.value("vocab_size", cfg.synth.vocab_size);
    cfg.synth.target_len_min = s.value("target_len_min", cfg.synth.target_len_min);
    cfg.synth.target_len_max = s.value("target_len_max", cfg.synth.target_len_max);
    cfg.synth.audio_repeat = s.value("audio_repeat", cfg.synth.audio_repeat);
    cfg.synth.video_repeat = s.value("video_repeat", cfg.synth.video_repeat);
    cfg.synth.d_audio = s.value("d_audio", cfg.synth.d_audio);
    cfg.synth.d_video = s.value("d_video", cfg.synth.d_video);
    cfg.synth.noise_sigma = s.value("noise_sigma", cfg.synth.noise_sigma);
    cfg.synth.stream_drop_prob = s.value("stream_drop_prob", cfg.synth.stream_drop_prob);
    cfg.synth.seed = s.value("seed", cfg.synth.seed);
  }
  if (j.count("pretrain")) train_from_json(j["pretrain"], cfg.pretrain, "pretrain");
  if (j.count("adapters")) train_from_json(j["adapters"], cfg.adapters, "adapters");
  cfg.train_samples = j.value("train_samples", cfg.train_samples);
  cfg.val_samples = j.value("val_samples", cfg.val_samples);
  cfg.test_samples = j.value("test_samples", cfg.test_samples);
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  cfg.seed = j.value("seed", cfg.seed);

  cfg.model.d_audio_in = cfg.synth.d_audio;
  cfg.model.d_video_in = cfg.synth.d_video;
  const int g = static_cast<int>(cfg.model.grid.audio_rates.size());
  const int l = static_cast<int>(cfg.model.grid.video_rates.size());
  cfg.adapters.scale_weights.g = g;
  cfg.adapters.scale_weights.l = l;
  if (cfg.adapters.scale_weights.c.size() != static_cast<std::size_t>(g) * l)
    cfg.adapters.scale_weights = ScaleWeights::uniform(g, l);
  cfg.normalize();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write '" + path + "'");
  out << to_json(cfg) << "\n";
}

}  // namespace matmoe
