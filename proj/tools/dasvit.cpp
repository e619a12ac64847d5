#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dasvit/config.hpp"
#include "dasvit/errors.hpp"
#include "dasvit/genotype.hpp"
#include "dasvit/pipeline.hpp"
#include "dasvit/search.hpp"
#include "dasvit/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Run configuration (JSON)");
  cmd->add_option("--seed", f.seed, "Override the configured seed");
  cmd->add_option("--out", f.out, "Output directory");
}

dasvit::RunConfig load_config(const CommonFlags& f) {
  dasvit::RunConfig cfg = f.config.empty() ? dasvit::config_from_json(json::object())
                                           : dasvit::read_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  return cfg;
}

void echo_config(const std::string& out, const dasvit::RunConfig& cfg) {
  if (out.empty()) return;
  fs::create_directories(out);
  dasvit::write_config(fs::path(out) / "config.json", cfg);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream o(path);
  o << j.dump(2) << '\n';
  if (!o) throw dasvit::IoError("cannot write " + path.string());
}

json eval_json(const dasvit::EvalResult& r, std::size_t samples) {
  return {{"loss", r.loss}, {"top1", r.top1}, {"top5", r.top5}, {"samples", samples}};
}

int run_search(const CommonFlags& f, std::optional<std::size_t> stages,
               const std::string& resume) {
  dasvit::RunConfig cfg = load_config(f);
  if (stages) cfg.search.stages = *stages;
  cfg.validate();
  dasvit::RunData data = dasvit::load_run_data(cfg);
  echo_config(f.out, cfg);
  dasvit::SearchOptions opts;
  opts.out_dir = f.out;
  dasvit::Searcher searcher(cfg, std::move(data.train), opts);
  if (!resume.empty()) searcher.resume(resume);
  const dasvit::Genotype g = searcher.run(cfg.search.stages);
  std::cout << dasvit::genotype_to_json(g).dump(2) << '\n';
  return 0;
}

int run_retrain(const CommonFlags& f, const std::string& genotype, const std::string& resume) {
  dasvit::RunConfig cfg = load_config(f);
  cfg.validate();
  const dasvit::Genotype g = dasvit::read_genotype(genotype);
  dasvit::RunData data = dasvit::load_run_data(cfg);
  echo_config(f.out, cfg);
  dasvit::RetrainOptions opts;
  opts.out_dir = f.out;
  if (!resume.empty()) opts.resume = resume;
  const auto result = dasvit::retrain(g, cfg, data.train, &data.test, data.norm, opts);
  json j{{"train", eval_json(result.final_train, data.train.size())}};
  if (result.final_test) j["test"] = eval_json(*result.final_test, data.test.size());
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_eval(const CommonFlags& f, const std::string& model_dir, const std::string& split) {
  dasvit::RunConfig cfg = load_config(f);
  dasvit::LoadedModel loaded = dasvit::load_model(model_dir);
  const auto& g = loaded.model->genotype();
  if (!(g.dims == cfg.model.dims)) {
    throw dasvit::ConfigError("eval: model dims differ from the configured model");
  }
  cfg.validate();
  const dasvit::RunData data = dasvit::load_run_data(cfg, loaded.norm);
  const dasvit::Dataset& d = split == "train" ? data.train : data.test;
  const auto r = dasvit::evaluate(
      [&](const dasvit::Tensor& x) { return loaded.model->forward(x); }, d,
      cfg.retrain.batch_size);
  const json j = eval_json(r, d.size());
  if (!f.out.empty()) {
    echo_config(f.out, cfg);
    write_json(fs::path(f.out) / "eval.json", j);
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_analyze(const std::string& genotype, bool as_json, bool final_norm, const std::string& out) {
  const dasvit::Genotype g = dasvit::read_genotype(genotype);
  const dasvit::CostReport report = dasvit::analyze_genotype(g, final_norm);
  if (as_json) {
    std::cout << report.to_json().dump(2) << '\n';
  } else {
    std::cout << report.table();
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "cost_report.json", report.to_json());
  }
  return 0;
}

void fail_line(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

int configure_threads() {
  const char* env = std::getenv("DASVIT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) {
    throw dasvit::ConfigError("DASVIT_THREADS must be a positive integer, got \"" +
                              std::string(env) + "\"");
  }
  return static_cast<int>(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable architecture search for vision transformers"};
  app.require_subcommand(1);

  CommonFlags search_flags, retrain_flags, eval_flags;
  std::optional<std::size_t> stages;
  std::string search_resume, retrain_resume, genotype, model_dir, analyze_out;
  std::string split = "test";
  bool as_json = false, no_final_norm = false;

  auto* search = app.add_subcommand("search", "Run the progressive architecture search");
  add_common(search, search_flags);
  search->add_option("--stages", stages, "Number of stages to run");
  search->add_option("--resume", search_resume, "Continue after a stage_k.ckpt directory");

  auto* retrain = app.add_subcommand("retrain", "Train a genotype from scratch");
  add_common(retrain, retrain_flags);
  retrain->add_option("--genotype", genotype, "Genotype JSON")->required();
  retrain->add_option("--resume", retrain_resume, "Continue from a model.ckpt directory");

  auto* eval = app.add_subcommand("eval", "Report top-1/top-5 accuracy of a trained model");
  add_common(eval, eval_flags);
  eval->add_option("--model", model_dir, "model.ckpt directory")->required();
  eval->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "test"}));

  std::string analyze_genotype;
  auto* analyze = app.add_subcommand("analyze", "Parameter, FLOP and activation counts");
  analyze->add_option("--genotype", analyze_genotype, "Genotype JSON")->required();
  analyze->add_flag("--json", as_json, "Print JSON instead of a table");
  analyze->add_flag("--no-final-norm", no_final_norm, "Omit the final layer norm");
  analyze->add_option("--out", analyze_out, "Directory for cost_report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return 2;
  }

  try {
    dasvit::set_num_threads(configure_threads());
    if (search->parsed()) return run_search(search_flags, stages, search_resume);
    if (retrain->parsed()) return run_retrain(retrain_flags, genotype, retrain_resume);
    if (eval->parsed()) return run_eval(eval_flags, model_dir, split);
    if (analyze->parsed()) return run_analyze(analyze_genotype, as_json, !no_final_norm, analyze_out);
  } catch (const dasvit::Error& e) {
    fail_line(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    fail_line("internal", e.what());
    return 1;
  }
  return 1;
}
