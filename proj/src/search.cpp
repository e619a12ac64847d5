#include "dasvit/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dasvit/checkpoint.hpp"
#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed stream tags.
constexpr std::uint64_t kSplitTag = 0x5e11;
constexpr std::uint64_t kStageTag = 0x57a9;
constexpr std::uint64_t kBatchTag = 0xba7c;
constexpr std::uint64_t kRetrainTag = 0x7e7a;

// Everything a stage checkpoint must hold to rebuild the supernet. Selector
// projections are stored even when frozen.
std::vector<NamedParam> stored_params(const SupernetModel& net) {
  auto out = net.weight_params();
  const auto& sc = net.config();
  if (sc.token_selection && sc.selector_grad_mode == SelectorGradMode::GatherOnly) {
    collect_selector_params(net.selector(), out);
  }
  return out;
}

SupernetConfig supernet_config(const RunConfig& cfg, std::size_t depth,
                               std::vector<OpSpec> candidates) {
  SupernetConfig sc;
  sc.dims = cfg.model.dims;
  sc.depth = depth;
  sc.candidates = std::move(candidates);
  sc.shared_alpha = cfg.search.shared_alpha;
  sc.prenorm = cfg.model.prenorm;
  sc.final_norm = cfg.model.final_norm;
  sc.token_selection = cfg.selector.enabled;
  sc.selector_lambda = cfg.selector.lambda;
  sc.selector_grad_mode = cfg.selector.grad_mode;
  sc.alpha_init_noise = cfg.search.alpha_init_noise;
  return sc;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> snapshot(const std::vector<NamedParam>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

// dst = base + factor * dir, over the concatenated parameter values.
void assign(const std::vector<NamedParam>& params, const std::vector<double>& base,
            const std::vector<double>* dir = nullptr, double factor = 0.0) {
  std::size_t off = 0;
  for (auto p : params) {
    auto d = p.tensor.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i, ++off) {
      d[i] = base[off] + (dir ? factor * (*dir)[off] : 0.0);
    }
  }
}

std::vector<double> gradients(const std::vector<NamedParam>& params) {
  std::vector<double> out;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) {
      out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    } else {
      out.insert(out.end(), p.tensor.numel(), 0.0);
    }
  }
  return out;
}

void zero_grads(const std::vector<NamedParam>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

std::vector<double> alpha_grad(const AlphaTable& alpha) {
  if (!alpha.logits.has_grad()) return std::vector<double>(alpha.logits.numel(), 0.0);
  return {alpha.logits.grad().begin(), alpha.logits.grad().end()};
}

Tensor batch_loss(const std::function<Tensor(const Tensor&)>& forward, const Batch& b) {
  return ops::cross_entropy(forward(b.images), b.labels);
}

std::string alpha_dump(const AlphaTable& alpha) {
  json rows = json::array();
  for (std::size_t r = 0; r < alpha.rows(); ++r) {
    json edges = json::array();
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      json w = json::object();
      const auto ew = alpha.edge_weights(r, e);
      for (std::size_t k = 0; k < alpha.candidates.size(); ++k) w[alpha.candidates[k].name()] = ew[k];
      edges.push_back(w);
    }
    rows.push_back(edges);
  }
  return rows.dump();
}

}  // namespace

std::vector<StagePlan> make_stage_plans(const SearchConfig& cfg, std::size_t stages) {
  if (stages == 0) throw ConfigError("search: stages must be at least 1");
  if (cfg.candidate_counts.empty()) throw ConfigError("search: candidate_counts is empty");
  std::vector<StagePlan> plans;
  auto count_at = [&](std::size_t i) {
    return cfg.candidate_counts[std::min(i, cfg.candidate_counts.size() - 1)];
  };
  for (std::size_t i = 0; i < stages; ++i) {
    StagePlan p;
    p.stage = i + 1;
    p.depth = cfg.initial_depth + i * cfg.depth_step;
    p.candidate_count = count_at(i);
    p.epochs = cfg.epochs_per_stage;
    p.prune_count = i + 1 < stages ? p.candidate_count - count_at(i + 1) : 0;
    plans.push_back(p);
  }
  return plans;
}

std::vector<CandidateScoreEntry> score_candidates(const AlphaTable& alpha, CandidateScore mode) {
  const std::size_t k = alpha.candidates.size();
  std::vector<CandidateScoreEntry> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i].op = alpha.candidates[i];
    out[i].score = mode == CandidateScore::Max ? -1.0 : 0.0;
  }
  const std::size_t cells = alpha.rows() * kCellEdges;
  for (std::size_t r = 0; r < alpha.rows(); ++r) {
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      const auto w = alpha.edge_weights(r, e);
      for (std::size_t i = 0; i < k; ++i) {
        if (mode == CandidateScore::Max) {
          out[i].score = std::max(out[i].score, w[i]);
        } else {
          out[i].score += w[i] / static_cast<double>(cells);
        }
      }
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

std::unique_ptr<SupernetModel> advance_stage(const SupernetModel& net,
                                             const std::vector<OpSpec>& survivors,
                                             std::size_t depth, Rng& rng) {
  if (survivors.size() < 2) {
    throw SearchError("advance_stage: fewer than 2 surviving candidates leaves nothing to search");
  }
  const AlphaTable& old = net.alpha();
  std::vector<std::size_t> old_index;
  for (const auto& op : survivors) {
    const auto i = old.index_of(op);
    if (i == static_cast<std::size_t>(-1)) {
      throw SearchError("advance_stage: " + op.name() + " is not a current candidate");
    }
    old_index.push_back(i);
  }
  SupernetConfig sc = net.config();
  sc.depth = depth;
  sc.candidates = survivors;
  auto next = std::make_unique<SupernetModel>(sc, rng);
  copy_matching_params(stored_params(net), stored_params(*next));

  AlphaTable& fresh = next->alpha();
  auto dst = fresh.logits.mutable_data();
  for (std::size_t r = 0; r < fresh.rows(); ++r) {
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      for (std::size_t j = 0; j < survivors.size(); ++j) {
        const std::size_t k = old_index[j];
        double v = 0;
        if (r < old.rows()) {
          v = old.logits[old.flat_index(r, e, k)];
        } else {
          for (std::size_t q = 0; q < old.rows(); ++q) v += old.logits[old.flat_index(q, e, k)];
          v /= static_cast<double>(old.rows());
        }
        dst[fresh.flat_index(r, e, j)] = v;
      }
    }
  }
  return next;
}

Genotype derive_genotype(const AlphaTable& alpha, const ModelDims& dims, std::size_t depth) {
  const std::size_t k = alpha.candidates.size();
  std::array<std::vector<double>, kCellEdges> w;
  for (std::size_t e = 0; e < kCellEdges; ++e) {
    w[e].assign(k, 0.0);
    for (std::size_t r = 0; r < alpha.rows(); ++r) {
      const auto ew = alpha.edge_weights(r, e);
      for (std::size_t i = 0; i < k; ++i) w[e][i] += ew[i] / static_cast<double>(alpha.rows());
    }
  }

  struct EdgePick {
    std::size_t edge;
    std::size_t op;  // npos without a non-Zero candidate
    double strength;
    bool zero_dominant;
  };
  auto pick = [&](std::size_t e) {
    EdgePick p{e, static_cast<std::size_t>(-1), -1.0, true};
    double zero_w = -1.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (alpha.candidates[i].kind == OpKind::Zero) {
        zero_w = std::max(zero_w, w[e][i]);
      } else if (w[e][i] > p.strength) {
        p.op = i;
        p.strength = w[e][i];
      }
    }
    // Zero dominates an edge when it holds the majority of the mixture.
    p.zero_dominant = p.op == static_cast<std::size_t>(-1) || zero_w > 0.5;
    return p;
  };

  Genotype g;
  g.dims = dims;
  g.depth = depth;
  for (std::size_t node = 0; node < 2; ++node) {
    std::vector<EdgePick> picks;
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      if (kCellTopology[e].target == static_cast<int>(node) + 2) picks.push_back(pick(e));
    }
    const bool all_zero = std::all_of(picks.begin(), picks.end(),
                                      [](const EdgePick& p) { return p.zero_dominant; });
    const bool missing = std::any_of(picks.begin(), picks.end(), [](const EdgePick& p) {
      return p.op == static_cast<std::size_t>(-1);
    });
    if (all_zero || missing) {
      throw SearchError("derive: every incoming edge of node n" + std::to_string(node) +
                        " is dominated by zero; alpha weights: " + alpha_dump(alpha));
    }
    std::stable_sort(picks.begin(), picks.end(),
                     [](const EdgePick& a, const EdgePick& b) { return a.strength > b.strength; });
    picks.resize(2);
    std::sort(picks.begin(), picks.end(),
              [](const EdgePick& a, const EdgePick& b) { return a.edge < b.edge; });
    for (const auto& p : picks) {
      g.nodes[node].push_back({kCellTopology[p.edge].source, alpha.candidates[p.op]});
    }
  }
  g.validate();
  return g;
}

SplitPlan make_split(std::size_t n, double train_fraction, std::uint64_t seed) {
  auto [train, val] = split_indices(n, train_fraction, seed);
  if (train.empty() || val.empty()) {
    throw ConfigError("search: train/validation split of " + std::to_string(n) +
                      " samples leaves a part empty");
  }
  return {std::move(train), std::move(val)};
}

Searcher::Searcher(RunConfig cfg, Dataset data, SearchOptions opts)
    : cfg_(std::move(cfg)), data_(std::move(data)), opts_(std::move(opts)) {
  cfg_.validate();
  data_.validate();
  split_ = make_split(data_.size(), cfg_.search.train_fraction, derive_seed(cfg_.seed, kSplitTag));
  plans_ = make_stage_plans(cfg_.search, cfg_.search.stages);
}

Searcher::~Searcher() = default;

void Searcher::start_stage(std::size_t stage) {
  if (stage == 0 || stage > plans_.size()) {
    throw SearchError("search: stage " + std::to_string(stage) + " outside the plan");
  }
  const StagePlan& plan = plans_[stage - 1];
  Rng rng(derive_seed(cfg_.seed, kStageTag, stage));
  if (!net_) {
    net_ = std::make_unique<SupernetModel>(
        supernet_config(cfg_, plan.depth, cfg_.search_space.registry()), rng);
  } else {
    const auto scores = score_candidates(net_->alpha(), cfg_.search.score);
    if (plan.candidate_count > scores.size()) {
      throw SearchError("search: stage " + std::to_string(stage) + " expects " +
                        std::to_string(plan.candidate_count) + " candidates but only " +
                        std::to_string(scores.size()) + " remain");
    }
    std::vector<OpSpec> survivors;
    for (const auto& op : net_->candidates()) {
      for (std::size_t i = 0; i < plan.candidate_count; ++i) {
        if (scores[i].op == op) survivors.push_back(op);
      }
    }
    net_ = advance_stage(*net_, survivors, plan.depth, rng);
  }
  if (net_->candidates().size() != plan.candidate_count) {
    throw SearchError("search: stage " + std::to_string(stage) + " has " +
                      std::to_string(net_->candidates().size()) + " candidates, expected " +
                      std::to_string(plan.candidate_count));
  }
  stage_ = stage;
  w_opt_ = std::make_unique<AdamW>(net_->weight_params(), cfg_.optimizer);
  AdamWConfig arch_cfg = cfg_.optimizer;
  arch_cfg.lr = cfg_.search.arch_lr;
  arch_cfg.weight_decay = cfg_.search.arch_weight_decay;
  arch_opt_ = std::make_unique<AdamW>(net_->arch_params(), arch_cfg);
  if (opts_.observer.on_stage_start) opts_.observer.on_stage_start(plan, *net_);
}

StepLosses Searcher::arch_step(const Batch& val, const Batch& train) {
  const auto weights = net_->weight_params();
  auto forward = [&](const Tensor& x) { return net_->forward(x); };
  StepLosses out;
  arch_opt_->zero_grad();
  w_opt_->zero_grad();

  const double xi = cfg_.search.xi;
  if (cfg_.search.mode == ArchMode::Unrolled && xi > 0) {
    const auto w0 = snapshot(weights);
    // Virtual step w' = w - xi * grad_w L_train(w).
    batch_loss(forward, train).backward();
    const auto g_train = gradients(weights);
    assign(weights, w0, &g_train, -xi);
    zero_grads(weights);
    arch_opt_->zero_grad();

    const Tensor l_val = batch_loss(forward, val);
    const auto terms = fairness_loss(net_->alpha(), cfg_.fairness);
    ops::add(l_val, terms.total).backward();
    out.val = l_val.item();
    out.skip = terms.skip.item();
    out.type = terms.type.item();
    out.fair = terms.total.item();
    const auto d_alpha = alpha_grad(net_->alpha());
    const auto d_w = gradients(weights);
    double norm = 0;
    for (double v : d_w) norm += v * v;
    norm = std::sqrt(norm);

    std::vector<double> hvp(d_alpha.size(), 0.0);
    if (norm > 0) {
      // Central difference of grad_alpha L_train at w +- eps * d_w.
      const double eps = cfg_.search.hvp_radius / norm;
      std::vector<double> plus, minus;
      for (double sign : {1.0, -1.0}) {
        assign(weights, w0, &d_w, sign * eps);
        zero_grads(weights);
        arch_opt_->zero_grad();
        batch_loss(forward, train).backward();
        (sign > 0 ? plus : minus) = alpha_grad(net_->alpha());
      }
      for (std::size_t i = 0; i < hvp.size(); ++i) hvp[i] = (plus[i] - minus[i]) / (2 * eps);
    }
    assign(weights, w0);
    zero_grads(weights);
    arch_opt_->zero_grad();
    std::vector<double> g(d_alpha.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = d_alpha[i] - xi * hvp[i];
    net_->alpha().logits.node()->accumulate(g);
  } else {
    const Tensor l_val = batch_loss(forward, val);
    const auto terms = fairness_loss(net_->alpha(), cfg_.fairness);
    ops::add(l_val, terms.total).backward();
    out.val = l_val.item();
    out.skip = terms.skip.item();
    out.type = terms.type.item();
    out.fair = terms.total.item();
  }
  arch_opt_->step();
  return out;
}

StepLosses Searcher::weight_step(const Batch& train) {
  w_opt_->zero_grad();
  arch_opt_->zero_grad();
  const Tensor loss = batch_loss([&](const Tensor& x) { return net_->forward(x); }, train);
  loss.backward();
  w_opt_->step();
  StepLosses out;
  out.train = loss.item();
  return out;
}

void Searcher::run_epoch(std::size_t epoch) {
  const StagePlan& plan = plans_.at(stage_ - 1);
  const LrSchedule schedule{cfg_.optimizer.lr, 0, 0.0, static_cast<int>(plan.epochs),
                            cfg_.search.min_lr};
  w_opt_->set_lr(schedule.lr_at(static_cast<int>(epoch)));

  const BatchPlan bp{cfg_.search.batch_size, false};
  const auto train_batches =
      epoch_batches(split_.train, bp, derive_seed(cfg_.seed, kBatchTag, stage_ * 100000 + epoch, 0));
  const auto val_batches =
      epoch_batches(split_.val, bp, derive_seed(cfg_.seed, kBatchTag, stage_ * 100000 + epoch, 1));

  std::size_t global = epoch;
  for (std::size_t s = 0; s + 1 < stage_; ++s) global += plans_[s].epochs;

  for (std::size_t i = 0; i < train_batches.size(); ++i) {
    const auto& vi = val_batches[i % val_batches.size()];
    const auto& ti = train_batches[i];
    if (opts_.observer.on_arch_batch) opts_.observer.on_arch_batch(vi);
    if (opts_.observer.on_weight_batch) opts_.observer.on_weight_batch(ti);
    const Batch vb = make_batch(data_, vi);
    const Batch tb = make_batch(data_, ti);
    StepLosses l;
    try {
      l = arch_step(vb, tb);
      l.train = weight_step(tb).train;
    } catch (const NumericError& e) {
      abort_non_finite("stage " + std::to_string(stage_) + " epoch " + std::to_string(epoch) +
                           " step " + std::to_string(i),
                       l, e.what());
    }
    log_step(global, i, l);
  }
  write_alpha_history(global);
  if (opts_.observer.on_epoch_end) opts_.observer.on_epoch_end(stage_, epoch, *net_);
}

void Searcher::finish_stage() {
  completed_ = stage_;
  if (opts_.out_dir.empty()) return;
  Checkpoint ckpt;
  add_params(ckpt, stored_params(*net_));
  add_params(ckpt, net_->arch_params());
  add_optimizer(ckpt, "w_opt", *w_opt_);
  add_optimizer(ckpt, "arch_opt", *arch_opt_);
  ckpt.meta["stage"] = stage_;
  ckpt.meta["depth"] = net_->depth();
  ckpt.meta["candidates"] = net_->candidates();
  write_checkpoint(opts_.out_dir / ("stage_" + std::to_string(stage_) + ".ckpt"), ckpt);
}

void Searcher::resume(const fs::path& stage_checkpoint) {
  const Checkpoint ckpt = read_checkpoint(stage_checkpoint);
  std::size_t stage = 0, depth = 0;
  std::vector<OpSpec> candidates;
  try {
    stage = ckpt.meta.at("stage").get<std::size_t>();
    depth = ckpt.meta.at("depth").get<std::size_t>();
    candidates = ckpt.meta.at("candidates").get<std::vector<OpSpec>>();
  } catch (const json::exception& e) {
    throw SchemaError("resume: " + stage_checkpoint.string() + ": bad metadata: " + e.what());
  }
  if (stage == 0 || stage > plans_.size()) {
    throw SearchError("resume: checkpoint stage " + std::to_string(stage) +
                      " does not fit a " + std::to_string(plans_.size()) + "-stage plan");
  }
  if (depth != plans_[stage - 1].depth || candidates.size() != plans_[stage - 1].candidate_count) {
    throw SearchError("resume: checkpoint does not match the configured stage plan");
  }
  Rng rng(derive_seed(cfg_.seed, kStageTag, stage));
  net_ = std::make_unique<SupernetModel>(supernet_config(cfg_, depth, candidates), rng);
  load_params(ckpt, stored_params(*net_));
  load_params(ckpt, net_->arch_params());
  stage_ = stage;
  completed_ = stage;
}

Genotype Searcher::run(std::size_t stages) {
  if (stages > plans_.size()) plans_ = make_stage_plans(cfg_.search, stages);
  if (!opts_.out_dir.empty()) {
    fs::create_directories(opts_.out_dir);
    const auto csv = opts_.out_dir / "alpha_history.csv";
    const bool fresh_csv = completed_ == 0 || !fs::exists(csv) || fs::file_size(csv) == 0;
    alpha_csv_.open(csv, fresh_csv ? std::ios::trunc : std::ios::app);
    if (fresh_csv) alpha_csv_ << "epoch,layer,edge,candidate,logit,softmax_weight\n";
    step_log_.open(opts_.out_dir / "search_log.jsonl",
                   completed_ == 0 ? std::ios::trunc : std::ios::app);
    if (!alpha_csv_ || !step_log_) {
      throw IoError("search: cannot open logs in " + opts_.out_dir.string());
    }
  }
  for (std::size_t stage = completed_ + 1; stage <= stages; ++stage) {
    start_stage(stage);
    for (std::size_t e = 0; e < plans_[stage - 1].epochs; ++e) run_epoch(e);
    finish_stage();
  }
  if (!net_) throw SearchError("search: no stage was run");
  alpha_csv_.close();
  step_log_.close();
  Genotype g = derive_genotype(net_->alpha(), cfg_.model.dims, net_->depth());
  if (!opts_.out_dir.empty()) write_genotype(opts_.out_dir / "genotype.json", g);
  return g;
}

void Searcher::write_alpha_history(std::size_t global_epoch) {
  if (!alpha_csv_.is_open()) return;
  const AlphaTable& a = net_->alpha();
  for (std::size_t l = 0; l < net_->depth(); ++l) {
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      const auto w = a.edge_weights(l, e);
      for (std::size_t k = 0; k < a.candidates.size(); ++k) {
        alpha_csv_ << global_epoch << ',' << l << ',' << e << ',' << a.candidates[k].name() << ','
                   << fmt(a.logit(l, e, k)) << ',' << fmt(w[k]) << '\n';
      }
    }
  }
  alpha_csv_.flush();
}

void Searcher::log_step(std::size_t epoch, std::size_t step, const StepLosses& l) {
  if (!step_log_.is_open()) return;
  json j{{"stage", stage_},   {"epoch", epoch},  {"step", step},     {"l_val", l.val},
         {"l_train", l.train}, {"l1", l.skip},    {"l2", l.type},     {"l_fair", l.fair},
         {"lr", w_opt_->lr()}};
  step_log_ << j.dump() << '\n';
}

void Searcher::abort_non_finite(const std::string& where, const StepLosses& l,
                                const std::string& what) {
  json diag{{"where", where},
            {"error", what},
            {"losses", {{"l_val", l.val}, {"l1", l.skip}, {"l2", l.type}, {"l_fair", l.fair}}},
            {"alpha_logits", std::vector<double>(net_->alpha().logits.data().begin(),
                                                 net_->alpha().logits.data().end())}};
  if (!opts_.out_dir.empty()) {
    fs::create_directories(opts_.out_dir);
    std::ofstream(opts_.out_dir / "diagnostic.json") << diag.dump(2) << '\n';
  }
  throw SearchError("search: non-finite value at " + where + ": " + what +
                    "; alpha logits: " + diag["alpha_logits"].dump());
}

EvalResult evaluate(const std::function<Tensor(const Tensor&)>& forward, const Dataset& data,
                    std::size_t batch_size) {
  if (data.size() == 0) throw SchemaError("evaluate: empty dataset");
  NoGradGuard guard;
  EvalResult r;
  const std::size_t top = std::min<std::size_t>(5, data.classes);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(data, idx);
    const Tensor logits = forward(b.images);
    const double n = static_cast<double>(idx.size());
    r.loss += ops::cross_entropy(logits, b.labels).item() * n;
    r.top1 += topk_accuracy(logits, b.labels, 1) * n;
    r.top5 += topk_accuracy(logits, b.labels, top) * n;
  }
  const double n = static_cast<double>(data.size());
  r.loss /= n;
  r.top1 /= n;
  r.top5 /= n;
  return r;
}

namespace {

void write_model(const fs::path& dir, const DerivedModel& model, const AdamW& opt,
                 std::size_t epoch, const ChannelStats& norm) {
  Checkpoint ckpt;
  add_params(ckpt, model.params());
  add_optimizer(ckpt, "opt", opt);
  ckpt.meta["epoch"] = epoch;
  ckpt.meta["genotype"] = genotype_to_json(model.genotype());
  ckpt.meta["options"] = {{"prenorm", model.options().prenorm},
                          {"final_norm", model.options().final_norm}};
  ckpt.meta["normalization"] = {{"mean", norm.mean}, {"std", norm.std}};
  write_checkpoint(dir, ckpt);
}

struct ModelMeta {
  Genotype genotype;
  DerivedOptions options;
  ChannelStats norm;
  std::size_t epoch = 0;
};

ModelMeta read_model_meta(const Checkpoint& ckpt, const fs::path& dir) {
  ModelMeta m;
  try {
    m.genotype = genotype_from_json(ckpt.meta.at("genotype"));
    m.options.prenorm = ckpt.meta.at("options").at("prenorm").get<bool>();
    m.options.final_norm = ckpt.meta.at("options").at("final_norm").get<bool>();
    m.norm.mean = ckpt.meta.at("normalization").at("mean").get<std::vector<double>>();
    m.norm.std = ckpt.meta.at("normalization").at("std").get<std::vector<double>>();
    m.epoch = ckpt.meta.at("epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw SchemaError("model checkpoint " + dir.string() + ": bad metadata: " + e.what());
  }
  return m;
}

}  // namespace

LrSchedule retrain_schedule(const RetrainConfig& rc, const AdamWConfig& opt) {
  return {opt.lr, static_cast<int>(rc.warmup_epochs), rc.warmup_start_lr,
          static_cast<int>(rc.epochs), rc.min_lr};
}

RetrainResult retrain(const Genotype& genotype, const RunConfig& cfg, const Dataset& train,
                      const Dataset* test, const ChannelStats& norm, RetrainOptions opts) {
  const RetrainConfig& rc = cfg.retrain;
  Genotype g = genotype;
  if (rc.depth != 0) g.depth = rc.depth;
  g.validate();
  if (!(g.dims == cfg.model.dims)) {
    throw ConfigError("retrain: genotype dims (embed " + std::to_string(g.dims.embed) + ", patch " +
                      std::to_string(g.dims.patch) + ", image " + std::to_string(g.dims.image) +
                      ", classes " + std::to_string(g.dims.classes) +
                      ") differ from the configured model");
  }
  if (train.image_size() != g.dims.image || train.channels() != g.dims.channels) {
    throw ConfigError("retrain: training images do not match the model input size");
  }
  Rng rng(derive_seed(cfg.seed, kRetrainTag));
  DerivedModel model(g, {cfg.model.prenorm, cfg.model.final_norm}, rng);
  AdamW opt(model.params(), cfg.optimizer);
  const LrSchedule schedule = retrain_schedule(rc, cfg.optimizer);

  std::size_t start = 0;
  if (opts.resume) {
    const Checkpoint ckpt = read_checkpoint(*opts.resume);
    const ModelMeta meta = read_model_meta(ckpt, *opts.resume);
    if (!(meta.genotype == g)) {
      throw SearchError("retrain: checkpoint genotype differs from the requested one");
    }
    load_params(ckpt, model.params());
    load_optimizer(ckpt, "opt", opt);
    start = meta.epoch;
  }

  std::unique_ptr<MetricsWriter> metrics;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    metrics = std::make_unique<MetricsWriter>(opts.out_dir / "metrics.csv", opts.resume.has_value());
  }
  auto forward = [&](const Tensor& x) { return model.forward(x); };
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);

  RetrainResult result;
  const std::size_t end = std::min(rc.epochs, opts.stop_after.value_or(rc.epochs));
  for (std::size_t epoch = start; epoch < end; ++epoch) {
    opt.set_lr(schedule.lr_at(static_cast<int>(epoch)));
    const auto batches =
        epoch_batches(all, {rc.batch_size, false}, derive_seed(cfg.seed, kRetrainTag, epoch + 1));
    for (std::size_t i = 0; i < batches.size(); ++i) {
      try {
        opt.zero_grad();
        const Tensor loss = batch_loss(forward, make_batch(train, batches[i]));
        loss.backward();
        opt.step();
      } catch (const NumericError& e) {
        if (!opts.out_dir.empty()) write_model(opts.out_dir / "model.ckpt", model, opt, epoch, norm);
        throw NumericError("retrain: non-finite value at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(i) + ": " + e.what());
      }
    }
    const std::size_t eval_batch = std::max<std::size_t>(rc.batch_size, 1);
    result.final_train = evaluate(forward, train, eval_batch);
    MetricsRow row{epoch, "train", result.final_train.loss, result.final_train.top1,
                   result.final_train.top5};
    result.rows.push_back(row);
    if (metrics) metrics->write(row);
    if (test) {
      result.final_test = evaluate(forward, *test, eval_batch);
      row = {epoch, "test", result.final_test->loss, result.final_test->top1,
             result.final_test->top5};
      result.rows.push_back(row);
      if (metrics) metrics->write(row);
    }
    const bool last = epoch + 1 == end;
    const bool periodic = rc.checkpoint_every != 0 && (epoch + 1) % rc.checkpoint_every == 0;
    if (!opts.out_dir.empty() && (last || periodic)) {
      write_model(opts.out_dir / "model.ckpt", model, opt, epoch + 1, norm);
    }
  }
  if (metrics) metrics->finalize();
  return result;
}

LoadedModel load_model(const fs::path& dir) {
  const Checkpoint ckpt = read_checkpoint(dir);
  const ModelMeta meta = read_model_meta(ckpt, dir);
  Rng rng(0);
  LoadedModel out;
  out.model = std::make_unique<DerivedModel>(meta.genotype, meta.options, rng);
  load_params(ckpt, out.model->params());
  out.norm = meta.norm;
  out.epoch = meta.epoch;
  return out;
}

}  // namespace dasvit
