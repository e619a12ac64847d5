#include "dasvit/token_select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

std::string to_string(SelectorGradMode mode) {
  return mode == SelectorGradMode::ScoreScaling ? "score_scaling" : "gather_only";
}

SelectorGradMode selector_grad_mode_from_string(const std::string& s) {
  if (s == "score_scaling") return SelectorGradMode::ScoreScaling;
  if (s == "gather_only") return SelectorGradMode::GatherOnly;
  throw ConfigError("selector.grad_mode: expected \"score_scaling\" or \"gather_only\", got \"" + s +
                    "\"");
}

SelectorParams init_selector(std::size_t embed, double lambda, SelectorGradMode mode, Rng& rng) {
  if (!(lambda > 0.0 && lambda <= 1.0)) {
    throw ConfigError("selector.lambda must lie in (0, 1], got " + std::to_string(lambda));
  }
  SelectorParams p;
  p.lambda = lambda;
  p.grad_mode = mode;
  for (Tensor* t : {&p.w_q, &p.w_k}) {
    *t = Tensor(Shape{embed, embed});
    for (auto& v : t->mutable_data()) v = rng.normal(0.0, 0.02);
    t->set_requires_grad(true);
  }
  return p;
}

void collect_selector_params(const SelectorParams& p, std::vector<NamedParam>& out) {
  out.push_back({"selector.w_q", p.w_q});
  out.push_back({"selector.w_k", p.w_k});
}

std::size_t kept_token_count(double lambda, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::floor(lambda * static_cast<double>(n)));
  if (k == 0) {
    throw ConfigError("token selection keeps no tokens (lambda=" + std::to_string(lambda) +
                      ", N=" + std::to_string(n) + "); use a larger lambda or more patches");
  }
  return std::min(k, n);
}

Tensor token_scores(const Tensor& x, const SelectorParams& p) {
  if (x.rank() != 3) throw ShapeError("token_scores: expected [B,N,C], got " + shape_str(x.shape()));
  const double c = static_cast<double>(x.dim(2));
  auto q = ops::matmul(x, p.w_q);
  auto k = ops::matmul(x, p.w_k);
  auto s = ops::scale(ops::matmul(q, ops::transpose(k, 1, 2)), 1.0 / std::sqrt(c));
  return ops::mean_last(s);
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

TokenSelection select_tokens(const Tensor& x, const SelectorParams& p) {
  if (x.rank() != 3 || x.dim(1) < 2) {
    throw ShapeError("select_tokens: expected [B,N+1,C] with N >= 1, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t n = x.dim(1) - 1;
  const std::size_t k = kept_token_count(p.lambda, n);
  const bool scaled = p.grad_mode == SelectorGradMode::ScoreScaling;

  auto patches = ops::slice(x, 1, 1, n);
  Tensor scores;
  if (scaled) {
    scores = token_scores(patches, p);
  } else {
    NoGradGuard guard;
    scores = token_scores(patches.detach(), p);
  }

  TokenSelection out;
  out.patch_indices.reserve(batch);
  std::vector<std::vector<std::size_t>> rows(batch);
  std::vector<std::size_t> flat;
  for (std::size_t b = 0; b < batch; ++b) {
    auto top = top_k_indices(scores.data().subspan(b * n, n), k);
    rows[b].reserve(k);
    for (std::size_t i : top) {
      rows[b].push_back(i);
      flat.push_back(b * n + i);
    }
    out.patch_indices.push_back(std::move(top));
  }

  auto kept = ops::gather_rows(patches, rows);
  if (scaled) {
    auto gate = ops::sigmoid(ops::reshape(ops::take(scores, flat), Shape{batch, k, 1}));
    kept = ops::mul(kept, gate);
  }
  out.tokens = ops::concat({ops::slice(x, 1, 0, 1), kept}, 1);
  return out;
}

}  // namespace dasvit
