#pragma once

#include <span>
#include <string>
#include <vector>

#include "dasvit/optim.hpp"
#include "dasvit/rng.hpp"
#include "dasvit/tensor.hpp"

namespace dasvit {

enum class SelectorGradMode {
  // Kept patch tokens are multiplied by sigmoid(score), so the scoring
  // projections receive gradients.
  ScoreScaling,
  // Tokens are copied unscaled; the scoring projections get no gradient.
  GatherOnly,
};

std::string to_string(SelectorGradMode mode);
// Throws ConfigError for anything but "score_scaling" / "gather_only".
SelectorGradMode selector_grad_mode_from_string(const std::string& s);

struct SelectorParams {
  Tensor w_q;  // C x C
  Tensor w_k;  // C x C
  double lambda = 0.5;
  SelectorGradMode grad_mode = SelectorGradMode::ScoreScaling;
};

// Throws ConfigError unless 0 < lambda <= 1.
SelectorParams init_selector(std::size_t embed, double lambda, SelectorGradMode mode, Rng& rng);
// Appends "selector.w_q" and "selector.w_k".
void collect_selector_params(const SelectorParams& p, std::vector<NamedParam>& out);

// floor(lambda * n); throws ConfigError when the result is 0.
std::size_t kept_token_count(double lambda, std::size_t n);

// x: [B,N,C] -> [B,N] with s_i = mean_j (q_i . k_j) / sqrt(C).
Tensor token_scores(const Tensor& x, const SelectorParams& p);

// Indices of the k largest scores in descending order; equal scores keep
// the lower index first.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

struct TokenSelection {
  Tensor tokens;  // [B, k+1, C], class token at row 0
  // Per batch element, kept patch indices (0-based among the N patch
  // tokens) in descending score order.
  std::vector<std::vector<std::size_t>> patch_indices;
};

// x: [B, N+1, C] with the class token at row 0. Scores are computed over
// the N patch tokens only; the class token is always kept.
TokenSelection select_tokens(const Tensor& x, const SelectorParams& p);

}  // namespace dasvit
