#pragma once

#include <array>
#include <functional>
#include <optional>
#include <vector>

#include "dasvit/optim.hpp"
#include "dasvit/rng.hpp"
#include "dasvit/tensor.hpp"
#include "dasvit/token_select.hpp"
#include "dasvit/vit_ops.hpp"

namespace dasvit {

// Cell DAG nodes: 0 = in0 (Z_{l-2}), 1 = in1 (Z_{l-1}), 2 = n0, 3 = n1.
struct CellEdge {
  int source;
  int target;
};

inline constexpr std::size_t kCellEdges = 5;
inline constexpr std::array<CellEdge, kCellEdges> kCellTopology{{
    {0, 2}, {1, 2}, {0, 3}, {1, 3}, {2, 3},
}};

// Output of one edge given the tensor at its source node.
using EdgeFn = std::function<Tensor(std::size_t edge, const Tensor& input)>;

// n0 = e0(in0) + e1(in1); n1 = e2(in0) + e3(in1) + e4(n0); returns n0 + n1.
Tensor cell_forward(const Tensor& in0, const Tensor& in1, const EdgeFn& edge);

// Architecture logits of shape [A, 5, K]: A = 1 when shared across layers,
// otherwise one row per layer.
struct AlphaTable {
  Tensor logits;
  std::vector<OpSpec> candidates;
  std::size_t layers = 0;
  bool shared = true;

  static AlphaTable init(std::size_t layers, std::vector<OpSpec> candidates, bool shared,
                         Rng& rng, double noise = 1e-3);

  std::size_t rows() const { return logits.dim(0); }
  std::size_t row_of(std::size_t layer) const { return shared ? 0 : layer; }
  std::size_t flat_index(std::size_t row, std::size_t edge, std::size_t k) const {
    return (row * kCellEdges + edge) * candidates.size() + k;
  }
  double logit(std::size_t layer, std::size_t edge, std::size_t k) const {
    return logits[flat_index(row_of(layer), edge, k)];
  }
  // Softmax over candidates, differentiable, same shape as logits.
  Tensor weights() const;
  // Plain softmax values of one (layer, edge).
  std::vector<double> edge_weights(std::size_t layer, std::size_t edge) const;
  // Index of `op` among the candidates, or npos.
  std::size_t index_of(const OpSpec& op) const;
};

// Weighted sum of candidate outputs; `weights` is AlphaTable::weights().
Tensor mixed_edge_forward(const Tensor& x, const std::vector<CandidateOp>& bank,
                          const Tensor& weights, std::size_t flat_offset,
                          const OpContext& ctx = {});

struct SupernetConfig {
  ModelDims dims;
  std::size_t depth = 2;
  std::vector<OpSpec> candidates = default_registry();
  bool shared_alpha = true;
  bool prenorm = true;
  bool final_norm = true;
  bool token_selection = true;
  double selector_lambda = 0.5;
  SelectorGradMode selector_grad_mode = SelectorGradMode::ScoreScaling;
  double alpha_init_noise = 1e-3;
};

class SupernetModel {
 public:
  SupernetModel(const SupernetConfig& cfg, Rng& rng);

  const SupernetConfig& config() const { return cfg_; }
  std::size_t depth() const { return cfg_.depth; }
  const std::vector<OpSpec>& candidates() const { return alpha_.candidates; }

  AlphaTable& alpha() { return alpha_; }
  const AlphaTable& alpha() const { return alpha_; }
  EmbedParams& embed() { return embed_; }
  HeadParams& head() { return head_; }
  const SelectorParams& selector() const { return selector_; }
  // banks[layer][edge][k] follows the candidate order.
  const std::vector<CandidateOp>& bank(std::size_t layer, std::size_t edge) const {
    return banks_[layer][edge];
  }

  // Embed -> token selection (when enabled) -> cells -> head.
  Tensor forward(const Tensor& images, ActivationTally* tally = nullptr) const;

  // Every trainable weight except alpha. Selector projections are included
  // only when they can receive gradients.
  std::vector<NamedParam> weight_params() const;
  std::vector<NamedParam> arch_params() const { return {{"alpha", alpha_.logits}}; }

  // Sets each (row, edge) to logit 0 for the chosen candidate and -1e4 for
  // all others. choice[edge] indexes candidates.
  void harden(const std::array<std::size_t, kCellEdges>& choice);

 private:
  SupernetConfig cfg_;
  EmbedParams embed_;
  SelectorParams selector_;
  std::vector<std::vector<std::vector<CandidateOp>>> banks_;
  AlphaTable alpha_;
  HeadParams head_;
};

// Name prefix of one candidate's parameters, e.g. "cell1.edge4.msa_h2".
std::string bank_prefix(std::size_t layer, std::size_t edge, const OpSpec& op);

// Copies values between parameters with equal names and shapes; returns the
// number copied.
std::size_t copy_matching_params(const std::vector<NamedParam>& from,
                                 const std::vector<NamedParam>& to);

}  // namespace dasvit
