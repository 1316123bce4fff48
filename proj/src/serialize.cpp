#include "matmoe/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace matmoe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void mix(const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write '" + path + "'");
  }
  void raw(const void* data, std::size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    hash_.mix(data, len);
  }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) { raw(v.data(), v.size() * sizeof(double)); }
  void finish_with_hash() {
    const std::uint64_t h = hash_.h;
    out_.write(reinterpret_cast<const char*>(&h), sizeof h);
  }

 private:
  std::ofstream out_;
  Fnv hash_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    buf_ = ss.str();
  }
  void raw(void* data, std::size_t len) {
    if (pos_ + len > buf_.size()) throw std::runtime_error("truncated file");
    std::memcpy(data, buf_.data() + pos_, len);
    pos_ += len;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    std::string s(len, '\0');
    raw(s.data(), len);
    return s;
  }
  std::vector<double> doubles(std::size_t count) {
    std::vector<double> v(count);
    raw(v.data(), count * sizeof(double));
    return v;
  }
  void verify_trailing_hash() {
    if (buf_.size() < sizeof(std::uint64_t) + pos_)
      throw std::runtime_error("missing trailing hash");
    Fnv hash;
    hash.mix(buf_.data(), buf_.size() - sizeof(std::uint64_t));
    std::uint64_t stored;
    std::memcpy(&stored, buf_.data() + buf_.size() - sizeof stored, sizeof stored);
    if (stored != hash.h) throw std::runtime_error("content hash mismatch; file corrupted");
  }
  std::size_t payload_size() const { return buf_.size() - sizeof(std::uint64_t); }
  std::size_t pos() const { return pos_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Writer w(path);
  w.raw(kMagic, 4);
  w.u32(ckpt.version);
  w.str(ckpt.config_json);
  w.i64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    w.doubles(t.values());
  }
  w.u32(static_cast<std::uint32_t>(ckpt.frozen_names.size()));
  for (const auto& n : ckpt.frozen_names) w.str(n);
  w.finish_with_hash();
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  r.verify_trailing_hash();
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != 1) throw std::runtime_error("unsupported checkpoint version");
  ckpt.config_json = r.str();
  ckpt.step = r.i64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const int rows = static_cast<int>(r.u32());
    const int cols = static_cast<int>(r.u32());
    auto vals = r.doubles(static_cast<std::size_t>(rows) * cols);
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor::from_values(rows, cols, std::move(vals)));
  }
  const std::uint32_t nf = r.u32();
  for (std::uint32_t i = 0; i < nf; ++i) ckpt.frozen_names.push_back(r.str());
  return ckpt;
}

Checkpoint checkpoint_from_model(Model& model, const ExperimentConfig& cfg, std::int64_t step) {
  Checkpoint ckpt;
  ckpt.config_json = to_json(cfg);
  ckpt.step = step;
  ckpt.tensors = model.named_params();
  for (const auto& [name, t] : model.backbone_params()) ckpt.frozen_names.push_back(name);
  return ckpt;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, ExperimentConfig* cfg_out) {
  ExperimentConfig cfg = config_from_json(ckpt.config_json);
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  auto params = model->named_params();
  if (params.size() != ckpt.tensors.size())
    throw std::runtime_error("checkpoint/model parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [stored_name, stored] = ckpt.tensors[i];
    auto& [name, t] = params[i];
    if (name != stored_name)
      throw std::runtime_error("checkpoint parameter '" + stored_name + "' does not match '" +
                               name + "'");
    if (t.rows() != stored.rows() || t.cols() != stored.cols())
      throw std::runtime_error("checkpoint parameter '" + name + "' shape mismatch");
    t.values() = stored.values();
  }
  if (cfg_out) *cfg_out = cfg;
  return model;
}

void check_config_matches(const Checkpoint& ckpt, const ExperimentConfig& expected) {
  if (ckpt.config_json != to_json(expected))
    throw std::runtime_error("checkpoint config does not match the supplied config");
}

namespace {

void write_split(const std::string& path, const std::vector<Sample>& samples) {
  Writer w(path);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    w.u32(static_cast<std::uint32_t>(s.target.size()));
    for (int id : s.target) w.u32(static_cast<std::uint32_t>(id));
    auto tensor = [&w](const Tensor& t) {
      w.u32(static_cast<std::uint32_t>(t.rows()));
      w.u32(static_cast<std::uint32_t>(t.cols()));
      w.doubles(t.values());
    };
    tensor(s.audio);
    tensor(s.video);
  }
  w.finish_with_hash();
}

std::vector<Sample> read_split(const std::string& path) {
  Reader r(path);
  r.verify_trailing_hash();
  const std::uint32_t n = r.u32();
  std::vector<Sample> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    const std::uint32_t len = r.u32();
    s.target.resize(len);
    for (auto& id : s.target) id = static_cast<int>(r.u32());
    auto tensor = [&r]() {
      const int rows = static_cast<int>(r.u32());
      const int cols = static_cast<int>(r.u32());
      auto vals = r.doubles(static_cast<std::size_t>(rows) * cols);
      return Tensor::from_values(rows, cols, std::move(vals));
    };
    s.audio = tensor();
    s.video = tensor();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  Fnv hash;
  hash.mix(buf.data(), buf.size());
  return hash.h;
}

DatasetSplits generate_splits(const ExperimentConfig& cfg) {
  Codebooks books = make_codebooks(cfg.synth);
  DatasetSplits splits;
  // Disjoint seed streams per split.
  splits.train = generate_dataset(cfg.synth, books, cfg.train_samples, cfg.seed * 3 + 1);
  splits.val = generate_dataset(cfg.synth, books, cfg.val_samples, cfg.seed * 3 + 2);
  splits.test = generate_dataset(cfg.synth, books, cfg.test_samples, cfg.seed * 3 + 3);
  return splits;
}

void save_dataset(const std::string& dir, const ExperimentConfig& cfg,
                  const DatasetSplits& data) {
  fs::create_directories(dir);
  write_split(dir + "/train.bin", data.train);
  write_split(dir + "/val.bin", data.val);
  write_split(dir + "/test.bin", data.test);
  json manifest;
  manifest["config"] = json::parse(to_json(cfg));
  manifest["splits"] = {
      {"train", {{"count", data.train.size()}, {"checksum", file_checksum(dir + "/train.bin")}}},
      {"val", {{"count", data.val.size()}, {"checksum", file_checksum(dir + "/val.bin")}}},
      {"test", {{"count", data.test.size()}, {"checksum", file_checksum(dir + "/test.bin")}}}};
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write '" + dir + "/manifest.json'");
  out << manifest.dump(2) << "\n";
}

DatasetSplits load_dataset(const std::string& dir, const ExperimentConfig& cfg) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("cannot open '" + dir + "/manifest.json'");
  json manifest = json::parse(in);
  for (const char* split : {"train", "val", "test"}) {
    const std::string path = dir + "/" + split + ".bin";
    const auto recorded = manifest.at("splits").at(split).at("checksum").get<std::uint64_t>();
    if (file_checksum(path) != recorded)
      throw std::runtime_error("dataset split '" + path + "' checksum mismatch");
  }
  (void)cfg;
  DatasetSplits splits;
  splits.train = read_split(dir + "/train.bin");
  splits.val = read_split(dir + "/val.bin");
  splits.test = read_split(dir + "/test.bin");
  return splits;
}

}  // namespace matmoe
