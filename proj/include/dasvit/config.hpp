#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dasvit/fairness.hpp"
#include "dasvit/optim.hpp"
#include "dasvit/token_select.hpp"
#include "dasvit/vit_ops.hpp"

namespace dasvit {

struct ModelConfig {
  ModelDims dims{768, 16, 224, 3, 10};
  bool prenorm = true;
  bool final_norm = true;
};

struct SearchSpaceConfig {
  std::vector<int> msa_heads{8, 12, 16};
  std::vector<double> mlp_ratios{0.5, 3.0, 4.0};

  std::vector<OpSpec> registry() const { return make_registry(msa_heads, mlp_ratios); }
};

struct SelectorConfig {
  bool enabled = true;
  double lambda = 0.5;
  SelectorGradMode grad_mode = SelectorGradMode::ScoreScaling;
};

enum class ArchMode { FirstOrder, Unrolled };
enum class CandidateScore { Mean, Max };

struct SearchConfig {
  std::size_t stages = 3;
  std::size_t epochs_per_stage = 30;
  std::size_t initial_depth = 2;
  std::size_t depth_step = 2;
  // Candidates alive in each stage; the first entry is the registry size.
  std::vector<std::size_t> candidate_counts{8, 5, 3};
  std::size_t batch_size = 64;
  double train_fraction = 0.5;
  ArchMode mode = ArchMode::FirstOrder;
  double xi = 0.0;  // virtual step size of the unrolled mode
  // Finite-difference radius of the Hessian-vector product, divided by the
  // norm of the validation gradient.
  double hvp_radius = 0.01;
  double arch_lr = 1e-3;
  double arch_weight_decay = 1e-3;
  double min_lr = 0.0;
  bool shared_alpha = true;
  CandidateScore score = CandidateScore::Mean;
  double alpha_init_noise = 1e-3;
};

struct RetrainConfig {
  std::size_t epochs = 500;
  std::size_t warmup_epochs = 20;
  double warmup_start_lr = 1e-6;
  double min_lr = 0.0;
  std::size_t batch_size = 128;
  std::size_t depth = 0;  // 0 keeps the genotype's depth
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
};

enum class DataSource { Synthetic, Cifar10 };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  std::string dir;
  std::size_t per_class = 64;
  std::size_t test_per_class = 32;
  double noise = 0.05;
  // Per-channel constants; empty means computed from the training set.
  std::vector<double> mean;
  std::vector<double> std;
  // Used when the source resolution differs from model.image.
  std::string resize_mode = "bilinear";
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  SearchSpaceConfig search_space;
  SelectorConfig selector;
  FairnessConfig fairness;
  SearchConfig search;
  RetrainConfig retrain;
  AdamWConfig optimizer;
  DataConfig data;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

// Strict: unknown keys and wrong types throw ConfigError naming the key path.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig read_config(const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace dasvit
