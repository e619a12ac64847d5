#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dasvit/optim.hpp"
#include "dasvit/tensor.hpp"

namespace dasvit {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// A checkpoint is a directory holding `manifest.json` (names, shapes, dtypes,
// byte offsets, free-form metadata) and `blob.bin` (little-endian float64
// values, concatenated in manifest order).
struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  nlohmann::json meta = nlohmann::json::object();

  const CheckpointEntry* find(const std::string& name) const;
  void add(const std::string& name, const Tensor& t);
  void add(const std::string& name, Shape shape, std::vector<double> values);
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

// Parameters become entries under their own names; optimiser moments go under
// `<prefix>.m.<name>` / `<prefix>.v.<name>` with the step in meta[prefix].
void add_params(Checkpoint& ckpt, const std::vector<NamedParam>& params);
void add_optimizer(Checkpoint& ckpt, const std::string& prefix, const AdamW& opt);
// Copies stored values into the given (already shaped) parameters.
void load_params(const Checkpoint& ckpt, const std::vector<NamedParam>& params);
void load_optimizer(const Checkpoint& ckpt, const std::string& prefix, AdamW& opt);

}  // namespace dasvit
