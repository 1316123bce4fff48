#pragma once

#include <string>

#include "matmoe/model.hpp"
#include "matmoe/synthdata.hpp"
#include "matmoe/train.hpp"

namespace matmoe {

// Everything one experiment needs, round-trippable through JSON. Unknown
// keys are rejected so ablation-config typos fail loudly.
struct ExperimentConfig {
  ModelConfig model;
  SynthSpec synth;
  TrainConfig pretrain;
  TrainConfig adapters;
  int train_samples = 256;
  int val_samples = 32;
  int test_samples = 32;
  std::string output_dir = "out";
  std::uint64_t seed = 1;

  void validate() const;
  // The grid/scale-weights/mode fields are mirrored into the nested configs
  // so they cannot drift apart.
  void normalize();
};

ExperimentConfig default_config();

std::string to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

}  // namespace matmoe
