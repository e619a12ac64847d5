#include "dasvit/fairness.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

void FairnessConfig::validate() const {
  if (a < 0 || b < 0 || zeta1 < 0 || zeta2 < 0) {
    throw ConfigError("fairness: a, b, zeta1 and zeta2 must be nonnegative");
  }
  if (!(0.0 <= gamma_min && gamma_min <= gamma_max && gamma_max <= 1.0)) {
    throw ConfigError("fairness: need 0 <= gamma_min <= gamma_max <= 1");
  }
}

namespace {
// Number of layers each alpha row stands for.
double row_multiplicity(const AlphaTable& alpha) {
  return alpha.shared ? static_cast<double>(alpha.layers) : 1.0;
}
}  // namespace

Tensor skip_fairness(const AlphaTable& alpha) {
  const std::size_t id = alpha.index_of(OpSpec::identity());
  if (id == std::string::npos) return Tensor::scalar(0.0);
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < alpha.rows(); ++r)
    for (std::size_t e = 0; e < kCellEdges; ++e) idx.push_back(alpha.flat_index(r, e, id));
  return ops::mean(ops::take(alpha.weights(), idx));
}

Tensor type_fairness(const AlphaTable& alpha, const FairnessConfig& cfg) {
  std::vector<std::string> types;
  for (const auto& op : alpha.candidates) {
    if (std::find(types.begin(), types.end(), op.type_tag()) == types.end()) {
      types.push_back(op.type_tag());
    }
  }
  const std::size_t k = alpha.candidates.size();
  Tensor membership(Shape{k, types.size()});
  for (std::size_t i = 0; i < k; ++i) {
    const auto t = std::find(types.begin(), types.end(), alpha.candidates[i].type_tag());
    membership.mutable_data()[i * types.size() + static_cast<std::size_t>(t - types.begin())] = 1.0;
  }
  const Tensor totals = ops::matmul(alpha.weights(), membership);
  const Tensor over = ops::relu(ops::add_scalar(totals, -cfg.gamma_max));
  const Tensor under = ops::relu(ops::add_scalar(ops::scale(totals, -1.0), cfg.gamma_min));
  const Tensor per = ops::add(ops::scale(over, cfg.zeta1), ops::scale(under, cfg.zeta2));
  return ops::scale(ops::sum(per), row_multiplicity(alpha));
}

FairnessTerms fairness_loss(const AlphaTable& alpha, const FairnessConfig& cfg) {
  FairnessTerms t;
  t.skip = skip_fairness(alpha);
  t.type = type_fairness(alpha, cfg);
  t.total = ops::add(ops::scale(t.skip, cfg.a), ops::scale(t.type, cfg.b));
  return t;
}

}  // namespace dasvit
