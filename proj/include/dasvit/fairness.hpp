#pragma once

#include "dasvit/supernet.hpp"
#include "dasvit/tensor.hpp"

namespace dasvit {

struct FairnessConfig {
  double a = 0.5;
  double b = 0.5;
  double zeta1 = 1.0;  // penalty above gamma_max
  double zeta2 = 1.0;  // penalty below gamma_min
  double gamma_min = 0.05;
  double gamma_max = 0.5;

  // Throws ConfigError unless 0 <= gamma_min <= gamma_max <= 1 and all
  // coefficients are nonnegative.
  void validate() const;
};

// Mean Identity weight over all (layer, edge); 0 without an Identity candidate.
Tensor skip_fairness(const AlphaTable& alpha);

// Sum over (layer, edge, type) of the hinge penalties on the per-edge type
// weight totals. Types are those present among the candidates.
Tensor type_fairness(const AlphaTable& alpha, const FairnessConfig& cfg);

struct FairnessTerms {
  Tensor skip;   // L1
  Tensor type;   // L2
  Tensor total;  // a * L1 + b * L2
};

FairnessTerms fairness_loss(const AlphaTable& alpha, const FairnessConfig& cfg);

}  // namespace dasvit
