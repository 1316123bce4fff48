#pragma once

#include <memory>
#include <string>
#include <vector>

#include "matmoe/config.hpp"
#include "matmoe/model.hpp"
#include "matmoe/synthdata.hpp"

namespace matmoe {

// Single binary container: little-endian doubles, length-prefixed names,
// trailing content hash. Loading verifies the hash and, when an expected
// config is supplied, the embedded config snapshot.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::string> frozen_names;
  std::int64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_model(Model& model, const ExperimentConfig& cfg, std::int64_t step);
// Builds a model from the embedded config and installs the stored tensors.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, ExperimentConfig* cfg_out);
// Throws if the checkpoint's config snapshot differs from expected.
void check_config_matches(const Checkpoint& ckpt, const ExperimentConfig& expected);

// Dataset files: one binary per split plus a JSON manifest with the spec,
// seed, sizes and per-file checksums.
struct DatasetSplits {
  std::vector<Sample> train, val, test;
};

void save_dataset(const std::string& dir, const ExperimentConfig& cfg, const DatasetSplits& data);
DatasetSplits load_dataset(const std::string& dir, const ExperimentConfig& cfg);
DatasetSplits generate_splits(const ExperimentConfig& cfg);

std::uint64_t file_checksum(const std::string& path);

}  // namespace matmoe
