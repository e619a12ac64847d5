#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "dasvit/config.hpp"
#include "dasvit/data.hpp"
#include "dasvit/fairness.hpp"
#include "dasvit/genotype.hpp"
#include "dasvit/optim.hpp"
#include "dasvit/supernet.hpp"

namespace dasvit {

struct StagePlan {
  std::size_t stage = 1;  // 1-based
  std::size_t depth = 2;
  std::size_t candidate_count = 8;
  std::size_t epochs = 30;
  std::size_t prune_count = 0;  // removed after this stage
};

// One plan per stage; the last stage prunes nothing.
std::vector<StagePlan> make_stage_plans(const SearchConfig& cfg, std::size_t stages);

struct CandidateScoreEntry {
  OpSpec op;
  double score = 0;
};

// Softmax weight per candidate, averaged (or maximized) over every (layer,
// edge); sorted descending with ties kept in candidate order.
std::vector<CandidateScoreEntry> score_candidates(const AlphaTable& alpha,
                                                  CandidateScore mode = CandidateScore::Mean);

// Next-stage supernet with `survivors` (kept in the old candidate order)
// and `depth` layers; fewer than 2 survivors throw SearchError. Shared layers inherit banks and logits; new layers get
// fresh banks and the layer-average of the inherited logits.
std::unique_ptr<SupernetModel> advance_stage(const SupernetModel& net,
                                             const std::vector<OpSpec>& survivors,
                                             std::size_t depth, Rng& rng);

// Keeps the two strongest incoming edges of each intermediate node
// (strength = largest non-Zero weight) and the strongest non-Zero op on
// each. Weights are averaged over layers. A node whose incoming edges all
// give Zero more than half of their weight throws SearchError.
Genotype derive_genotype(const AlphaTable& alpha, const ModelDims& dims, std::size_t depth);

struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

SplitPlan make_split(std::size_t n, double train_fraction, std::uint64_t seed);

struct StepLosses {
  double val = 0;
  double train = 0;
  double skip = 0;
  double type = 0;
  double fair = 0;
};

struct SearchObserver {
  std::function<void(const std::vector<std::size_t>&)> on_arch_batch;
  std::function<void(const std::vector<std::size_t>&)> on_weight_batch;
  std::function<void(std::size_t stage, std::size_t epoch, const SupernetModel&)> on_epoch_end;
  std::function<void(const StagePlan&, const SupernetModel&)> on_stage_start;
};

struct SearchOptions {
  std::filesystem::path out_dir;  // empty: no files written
  SearchObserver observer;
};

// Progressive bi-level search over a dataset.
class Searcher {
 public:
  Searcher(RunConfig cfg, Dataset data, SearchOptions opts = {});
  ~Searcher();

  // Runs stages [next, stages] and returns the derived genotype.
  Genotype run(std::size_t stages);
  // Continues after the stage stored in a stage checkpoint.
  void resume(const std::filesystem::path& stage_checkpoint);

  const SupernetModel& model() const { return *net_; }
  SupernetModel& model() { return *net_; }
  const SplitPlan& split() const { return split_; }
  const std::vector<StagePlan>& plans() const { return plans_; }
  std::size_t completed_stages() const { return completed_; }

  // Building blocks of one epoch, exposed for tests.
  void start_stage(std::size_t stage);
  void run_epoch(std::size_t epoch_in_stage);
  StepLosses arch_step(const Batch& val, const Batch& train);
  StepLosses weight_step(const Batch& train);
  void finish_stage();

 private:
  void write_alpha_history(std::size_t global_epoch);
  void log_step(std::size_t epoch, std::size_t step, const StepLosses& l);
  [[noreturn]] void abort_non_finite(const std::string& where, const StepLosses& l,
                                     const std::string& what);

  RunConfig cfg_;
  Dataset data_;
  SearchOptions opts_;
  SplitPlan split_;
  std::vector<StagePlan> plans_;
  std::unique_ptr<SupernetModel> net_;
  std::unique_ptr<AdamW> w_opt_;
  std::unique_ptr<AdamW> arch_opt_;
  std::size_t stage_ = 0;
  std::size_t completed_ = 0;
  std::ofstream alpha_csv_;
  std::ofstream step_log_;
};

struct EvalResult {
  double loss = 0;
  double top1 = 0;
  double top5 = 0;
};

EvalResult evaluate(const std::function<Tensor(const Tensor&)>& forward, const Dataset& data,
                    std::size_t batch_size);

struct RetrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::optional<std::filesystem::path> resume;  // model checkpoint directory
  // Stop (with a checkpoint) once this many epochs are complete.
  std::optional<std::size_t> stop_after;
};

struct RetrainResult {
  std::vector<MetricsRow> rows;
  EvalResult final_train;
  std::optional<EvalResult> final_test;
};

// Warmup + cosine schedule over the retraining epochs.
LrSchedule retrain_schedule(const RetrainConfig& rc, const AdamWConfig& opt);

// Trains the genotype's derived model from scratch with AdamW and
// warmup+cosine, without token selection. `norm` is stored with the model.
// The genotype dims must equal cfg.model.dims.
RetrainResult retrain(const Genotype& g, const RunConfig& cfg, const Dataset& train,
                      const Dataset* test, const ChannelStats& norm, RetrainOptions opts = {});

struct LoadedModel {
  std::unique_ptr<DerivedModel> model;
  ChannelStats norm;
  std::size_t epoch = 0;
};

LoadedModel load_model(const std::filesystem::path& checkpoint_dir);

}  // namespace dasvit
