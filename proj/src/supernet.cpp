#include "dasvit/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

Tensor cell_forward(const Tensor& in0, const Tensor& in1, const EdgeFn& edge) {
  if (in0.shape() != in1.shape()) {
    throw ShapeError("cell: inputs " + shape_str(in0.shape()) + " and " + shape_str(in1.shape()) +
                     " differ");
  }
  const Tensor n0 = ops::add(edge(0, in0), edge(1, in1));
  const Tensor n1 = ops::add(ops::add(edge(2, in0), edge(3, in1)), edge(4, n0));
  return ops::add(n0, n1);
}

AlphaTable AlphaTable::init(std::size_t layers, std::vector<OpSpec> candidates, bool shared,
                            Rng& rng, double noise) {
  if (candidates.empty()) throw ConfigError("alpha: empty candidate list");
  AlphaTable a;
  a.layers = layers;
  a.shared = shared;
  a.candidates = std::move(candidates);
  a.logits = Tensor(Shape{shared ? 1 : layers, kCellEdges, a.candidates.size()});
  for (auto& v : a.logits.mutable_data()) v = rng.normal(0.0, noise);
  a.logits.set_requires_grad(true);
  return a;
}

Tensor AlphaTable::weights() const { return ops::softmax(logits); }

std::vector<double> AlphaTable::edge_weights(std::size_t layer, std::size_t edge) const {
  const std::size_t k = candidates.size();
  const std::size_t base = flat_index(row_of(layer), edge, 0);
  double mx = -INFINITY;
  for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, logits[base + i]);
  std::vector<double> w(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += (w[i] = std::exp(logits[base + i] - mx));
  for (auto& v : w) v /= total;
  return w;
}

std::size_t AlphaTable::index_of(const OpSpec& op) const {
  auto it = std::find(candidates.begin(), candidates.end(), op);
  return it == candidates.end() ? std::string::npos
                                : static_cast<std::size_t>(it - candidates.begin());
}

Tensor mixed_edge_forward(const Tensor& x, const std::vector<CandidateOp>& bank,
                          const Tensor& weights, std::size_t flat_offset, const OpContext& ctx) {
  if (bank.empty()) throw SearchError("mixed edge: empty candidate list");
  Tensor out;
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const std::size_t idx = flat_offset + k;
    const Tensor w = ops::take(weights, std::span<const std::size_t>(&idx, 1));
    const Tensor term = ops::mul(bank[k].forward(x, ctx), w);
    out = out.defined() ? ops::add(out, term) : term;
  }
  return out;
}

std::string bank_prefix(std::size_t layer, std::size_t edge, const OpSpec& op) {
  return "cell" + std::to_string(layer) + ".edge" + std::to_string(edge) + "." + op.name();
}

SupernetModel::SupernetModel(const SupernetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.dims.validate();
  if (cfg_.depth == 0) throw ConfigError("supernet: depth must be positive");
  if (cfg_.candidates.empty()) throw ConfigError("supernet: empty candidate list");
  embed_ = init_embed(cfg_.dims, rng);
  if (cfg_.token_selection) {
    selector_ = init_selector(cfg_.dims.embed, cfg_.selector_lambda, cfg_.selector_grad_mode, rng);
    kept_token_count(cfg_.selector_lambda, cfg_.dims.patch_count());
  }
  banks_.resize(cfg_.depth);
  for (auto& layer : banks_) {
    layer.resize(kCellEdges);
    for (auto& edge : layer) {
      edge.reserve(cfg_.candidates.size());
      for (const auto& op : cfg_.candidates) edge.emplace_back(op, cfg_.dims.embed, rng);
    }
  }
  alpha_ = AlphaTable::init(cfg_.depth, cfg_.candidates, cfg_.shared_alpha, rng,
                            cfg_.alpha_init_noise);
  head_ = init_head(cfg_.dims, cfg_.final_norm, rng);
}

Tensor SupernetModel::forward(const Tensor& images, ActivationTally* tally) const {
  Tensor z0 = embed_forward(images, embed_, cfg_.dims.patch);
  if (cfg_.token_selection) z0 = select_tokens(z0, selector_).tokens;
  const Tensor weights = alpha_.weights();
  const OpContext ctx{.prenorm = cfg_.prenorm, .tally = tally};
  Tensor prev2 = z0;
  Tensor prev1 = z0;
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::size_t row = alpha_.row_of(l);
    Tensor z = cell_forward(prev2, prev1, [&](std::size_t e, const Tensor& x) {
      return mixed_edge_forward(x, banks_[l][e], weights, alpha_.flat_index(row, e, 0), ctx);
    });
    prev2 = prev1;
    prev1 = z;
  }
  return head_forward(prev1, head_);
}

std::vector<NamedParam> SupernetModel::weight_params() const {
  std::vector<NamedParam> out;
  collect_embed_params(embed_, out);
  if (cfg_.token_selection && cfg_.selector_grad_mode == SelectorGradMode::ScoreScaling) {
    collect_selector_params(selector_, out);
  }
  for (std::size_t l = 0; l < banks_.size(); ++l)
    for (std::size_t e = 0; e < kCellEdges; ++e)
      for (const auto& op : banks_[l][e]) op.collect_params(bank_prefix(l, e, op.spec()), out);
  collect_head_params(head_, out);
  return out;
}

void SupernetModel::harden(const std::array<std::size_t, kCellEdges>& choice) {
  const std::size_t k = alpha_.candidates.size();
  auto data = alpha_.logits.mutable_data();
  for (std::size_t r = 0; r < alpha_.rows(); ++r) {
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      if (choice[e] >= k) throw SearchError("harden: candidate index out of range");
      for (std::size_t i = 0; i < k; ++i)
        data[alpha_.flat_index(r, e, i)] = i == choice[e] ? 0.0 : -1e4;
    }
  }
}

std::size_t copy_matching_params(const std::vector<NamedParam>& from,
                                 const std::vector<NamedParam>& to) {
  std::map<std::string, const Tensor*> index;
  for (const auto& p : from) index[p.name] = &p.tensor;
  std::size_t copied = 0;
  for (auto p : to) {
    auto it = index.find(p.name);
    if (it == index.end() || it->second->shape() != p.tensor.shape()) continue;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
    ++copied;
  }
  return copied;
}

}  // namespace dasvit
