#include "dasvit/config.hpp"

#include <fstream>
#include <set>

#include "dasvit/errors.hpp"

namespace dasvit {

namespace {

using nlohmann::json;

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "/" : path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    const std::string at = path_ + "/" + key;
    convert(v, at, out);
  }

  Section child(const char* key) {
    used_.insert(key);
    if (!j_.contains(key)) return Section(empty(), path_ + "/" + key);
    return Section(j_.at(key), path_ + "/" + key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) fail(path_ + "/" + key, "unknown key");
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError("config: " + path + ": " + what);
  }

  static void convert(const json& v, const std::string& at, bool& out) {
    if (!v.is_boolean()) fail(at, "expected a boolean");
    out = v.get<bool>();
  }
  static void convert(const json& v, const std::string& at, double& out) {
    if (!v.is_number()) fail(at, "expected a number");
    out = v.get<double>();
  }
  static void convert(const json& v, const std::string& at, int& out) {
    if (!v.is_number_integer()) fail(at, "expected an integer");
    out = v.get<int>();
  }
  static void convert(const json& v, const std::string& at, unsigned long& out) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      fail(at, "expected a nonnegative integer");
    }
    out = v.get<unsigned long>();
  }
  static void convert(const json& v, const std::string& at, std::string& out) {
    if (!v.is_string()) fail(at, "expected a string");
    out = v.get<std::string>();
  }
  template <typename T>
  static void convert(const json& v, const std::string& at, std::vector<T>& out) {
    if (!v.is_array()) fail(at, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T item{};
      convert(v[i], at + "/" + std::to_string(i), item);
      out.push_back(item);
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename E>
E parse_enum(const std::string& path, const std::string& value,
             std::initializer_list<std::pair<const char*, E>> options) {
  std::string allowed;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    allowed += allowed.empty() ? "" : ", ";
    allowed += name;
  }
  throw ConfigError("config: " + path + ": \"" + value + "\" is not one of " + allowed);
}

std::string arch_mode_name(ArchMode m) { return m == ArchMode::FirstOrder ? "first_order" : "unrolled"; }
std::string score_name(CandidateScore s) { return s == CandidateScore::Mean ? "mean" : "max"; }
std::string source_name(DataSource s) { return s == DataSource::Synthetic ? "synthetic" : "cifar10"; }

}  // namespace

void RunConfig::validate() const {
  model.dims.validate();
  fairness.validate();
  const auto reg = search_space.registry();
  for (int h : search_space.msa_heads) {
    if (h <= 0 || model.dims.embed % static_cast<std::size_t>(h) != 0) {
      throw ConfigError("config: /search_space/msa_heads: " + std::to_string(h) +
                        " heads do not divide model.embed " + std::to_string(model.dims.embed));
    }
  }
  for (double r : search_space.mlp_ratios)
    if (!(r > 0)) throw ConfigError("config: /search_space/mlp_ratios: ratios must be positive");
  if (!(selector.lambda > 0 && selector.lambda <= 1)) {
    throw ConfigError("config: /selector/lambda must lie in (0, 1]");
  }
  if (selector.enabled) kept_token_count(selector.lambda, model.dims.patch_count());

  const auto& s = search;
  if (s.stages == 0) throw ConfigError("config: /search/stages must be positive");
  if (s.candidate_counts.size() < s.stages) {
    throw ConfigError("config: /search/candidate_counts needs one entry per stage");
  }
  if (s.candidate_counts.front() != reg.size()) {
    throw ConfigError("config: /search/candidate_counts must start at the registry size " +
                      std::to_string(reg.size()));
  }
  for (std::size_t i = 0; i < s.candidate_counts.size(); ++i) {
    if (s.candidate_counts[i] < 2) {
      throw ConfigError("config: /search/candidate_counts: fewer than 2 candidates leaves nothing to search");
    }
    if (i > 0 && s.candidate_counts[i] > s.candidate_counts[i - 1]) {
      throw ConfigError("config: /search/candidate_counts must not increase");
    }
  }
  if (s.initial_depth == 0) throw ConfigError("config: /search/initial_depth must be positive");
  if (s.epochs_per_stage == 0) throw ConfigError("config: /search/epochs_per_stage must be positive");
  if (s.batch_size == 0 || retrain.batch_size == 0) throw ConfigError("config: batch sizes must be positive");
  if (!(s.train_fraction > 0 && s.train_fraction < 1)) {
    throw ConfigError("config: /search/train_fraction must lie in (0, 1)");
  }
  if (!(s.hvp_radius > 0)) throw ConfigError("config: /search/hvp_radius must be positive");
  if (s.xi < 0 || s.arch_lr < 0 || s.arch_weight_decay < 0) {
    throw ConfigError("config: /search: xi, arch_lr and arch_weight_decay must be nonnegative");
  }
  if (retrain.epochs == 0 || retrain.warmup_epochs >= retrain.epochs) {
    throw ConfigError("config: /retrain: need 0 <= warmup_epochs < epochs");
  }
  if (optimizer.lr <= 0 || optimizer.weight_decay < 0) {
    throw ConfigError("config: /optimizer: lr must be positive and weight_decay nonnegative");
  }
  if (data.source == DataSource::Cifar10 && data.dir.empty()) {
    throw ConfigError("config: /data/dir is required for cifar10");
  }
  if (data.mean.size() != data.std.size() ||
      (!data.mean.empty() && data.mean.size() != model.dims.channels)) {
    throw ConfigError("config: /data/mean and /data/std need one value per channel");
  }
  if (data.resize_mode != "bilinear" && data.resize_mode != "nearest") {
    throw ConfigError("config: /data/resize_mode must be \"bilinear\" or \"nearest\"");
  }
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);

  auto m = root.child("model");
  m.get("embed", c.model.dims.embed);
  m.get("patch", c.model.dims.patch);
  m.get("image", c.model.dims.image);
  m.get("channels", c.model.dims.channels);
  m.get("classes", c.model.dims.classes);
  m.get("prenorm", c.model.prenorm);
  m.get("final_norm", c.model.final_norm);
  m.finish();

  auto sp = root.child("search_space");
  sp.get("msa_heads", c.search_space.msa_heads);
  sp.get("mlp_ratios", c.search_space.mlp_ratios);
  sp.finish();

  auto sel = root.child("selector");
  sel.get("enabled", c.selector.enabled);
  sel.get("lambda", c.selector.lambda);
  std::string grad_mode = to_string(c.selector.grad_mode);
  sel.get("grad_mode", grad_mode);
  c.selector.grad_mode = parse_enum<SelectorGradMode>(
      "/selector/grad_mode", grad_mode,
      {{"score_scaling", SelectorGradMode::ScoreScaling}, {"gather_only", SelectorGradMode::GatherOnly}});
  sel.finish();

  auto f = root.child("fairness");
  f.get("a", c.fairness.a);
  f.get("b", c.fairness.b);
  f.get("zeta1", c.fairness.zeta1);
  f.get("zeta2", c.fairness.zeta2);
  f.get("gamma_min", c.fairness.gamma_min);
  f.get("gamma_max", c.fairness.gamma_max);
  f.finish();

  auto s = root.child("search");
  s.get("stages", c.search.stages);
  s.get("epochs_per_stage", c.search.epochs_per_stage);
  s.get("initial_depth", c.search.initial_depth);
  s.get("depth_step", c.search.depth_step);
  s.get("candidate_counts", c.search.candidate_counts);
  s.get("batch_size", c.search.batch_size);
  s.get("train_fraction", c.search.train_fraction);
  std::string mode = arch_mode_name(c.search.mode);
  s.get("mode", mode);
  c.search.mode = parse_enum<ArchMode>("/search/mode", mode,
                                       {{"first_order", ArchMode::FirstOrder}, {"unrolled", ArchMode::Unrolled}});
  s.get("xi", c.search.xi);
  s.get("hvp_radius", c.search.hvp_radius);
  s.get("arch_lr", c.search.arch_lr);
  s.get("arch_weight_decay", c.search.arch_weight_decay);
  s.get("min_lr", c.search.min_lr);
  s.get("shared_alpha", c.search.shared_alpha);
  std::string score = score_name(c.search.score);
  s.get("score", score);
  c.search.score = parse_enum<CandidateScore>("/search/score", score,
                                              {{"mean", CandidateScore::Mean}, {"max", CandidateScore::Max}});
  s.get("alpha_init_noise", c.search.alpha_init_noise);
  s.finish();

  auto r = root.child("retrain");
  r.get("epochs", c.retrain.epochs);
  r.get("warmup_epochs", c.retrain.warmup_epochs);
  r.get("warmup_start_lr", c.retrain.warmup_start_lr);
  r.get("min_lr", c.retrain.min_lr);
  r.get("batch_size", c.retrain.batch_size);
  r.get("depth", c.retrain.depth);
  r.get("checkpoint_every", c.retrain.checkpoint_every);
  r.finish();

  auto o = root.child("optimizer");
  o.get("lr", c.optimizer.lr);
  o.get("weight_decay", c.optimizer.weight_decay);
  o.get("beta1", c.optimizer.beta1);
  o.get("beta2", c.optimizer.beta2);
  o.get("eps", c.optimizer.eps);
  o.finish();

  auto d = root.child("data");
  std::string source = source_name(c.data.source);
  d.get("source", source);
  c.data.source = parse_enum<DataSource>("/data/source", source,
                                         {{"synthetic", DataSource::Synthetic}, {"cifar10", DataSource::Cifar10}});
  d.get("dir", c.data.dir);
  d.get("per_class", c.data.per_class);
  d.get("test_per_class", c.data.test_per_class);
  d.get("noise", c.data.noise);
  d.get("mean", c.data.mean);
  d.get("std", c.data.std);
  d.get("resize_mode", c.data.resize_mode);
  d.finish();

  root.finish();
  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"model",
       {{"embed", c.model.dims.embed},
        {"patch", c.model.dims.patch},
        {"image", c.model.dims.image},
        {"channels", c.model.dims.channels},
        {"classes", c.model.dims.classes},
        {"prenorm", c.model.prenorm},
        {"final_norm", c.model.final_norm}}},
      {"search_space", {{"msa_heads", c.search_space.msa_heads}, {"mlp_ratios", c.search_space.mlp_ratios}}},
      {"selector",
       {{"enabled", c.selector.enabled},
        {"lambda", c.selector.lambda},
        {"grad_mode", to_string(c.selector.grad_mode)}}},
      {"fairness",
       {{"a", c.fairness.a},
        {"b", c.fairness.b},
        {"zeta1", c.fairness.zeta1},
        {"zeta2", c.fairness.zeta2},
        {"gamma_min", c.fairness.gamma_min},
        {"gamma_max", c.fairness.gamma_max}}},
      {"search",
       {{"stages", c.search.stages},
        {"epochs_per_stage", c.search.epochs_per_stage},
        {"initial_depth", c.search.initial_depth},
        {"depth_step", c.search.depth_step},
        {"candidate_counts", c.search.candidate_counts},
        {"batch_size", c.search.batch_size},
        {"train_fraction", c.search.train_fraction},
        {"mode", arch_mode_name(c.search.mode)},
        {"xi", c.search.xi},
        {"hvp_radius", c.search.hvp_radius},
        {"arch_lr", c.search.arch_lr},
        {"arch_weight_decay", c.search.arch_weight_decay},
        {"min_lr", c.search.min_lr},
        {"shared_alpha", c.search.shared_alpha},
        {"score", score_name(c.search.score)},
        {"alpha_init_noise", c.search.alpha_init_noise}}},
      {"retrain",
       {{"epochs", c.retrain.epochs},
        {"warmup_epochs", c.retrain.warmup_epochs},
        {"warmup_start_lr", c.retrain.warmup_start_lr},
        {"min_lr", c.retrain.min_lr},
        {"batch_size", c.retrain.batch_size},
        {"depth", c.retrain.depth},
        {"checkpoint_every", c.retrain.checkpoint_every}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"weight_decay", c.optimizer.weight_decay},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps}}},
      {"data",
       {{"source", source_name(c.data.source)},
        {"dir", c.data.dir},
        {"per_class", c.data.per_class},
        {"test_per_class", c.data.test_per_class},
        {"noise", c.data.noise},
        {"mean", c.data.mean},
        {"std", c.data.std},
        {"resize_mode", c.data.resize_mode}}},
  };
}

RunConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": malformed JSON: " + e.what());
  }
  return config_from_json(j);
}

void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path.string());
  out << config_to_json(cfg).dump(2) << "\n";
  if (!out) throw IoError("failed writing config file " + path.string());
}

}  // namespace dasvit
