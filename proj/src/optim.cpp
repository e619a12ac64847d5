#include "dasvit/optim.hpp"

#include <cmath>
#include <numbers>

#include "dasvit/errors.hpp"

namespace dasvit {

AdamW::AdamW(std::vector<NamedParam> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    state_.first_moment.emplace_back(p.tensor.numel(), 0.0);
    state_.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) throw NumericError("adamw: parameter '" + p.name + "' has no gradient");
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor w = params_[i].tensor;
    auto values = w.mutable_data();
    const auto grad = w.grad();
    auto& m = state_.first_moment[i];
    auto& v = state_.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      values[j] = values[j] * decay - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::restore(OptimizerState state) {
  if (state.first_moment.size() != params_.size() || state.second_moment.size() != params_.size()) {
    throw ShapeError("adamw: restored state covers a different parameter count");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (state.first_moment[i].size() != params_[i].tensor.numel() ||
        state.second_moment[i].size() != params_[i].tensor.numel()) {
      throw ShapeError("adamw: restored moments for '" + params_[i].name + "' have wrong size");
    }
  }
  if (state.step < 0) throw ConfigError("adamw: negative step count");
  state_ = std::move(state);
}

double LrSchedule::lr_at(int epoch) const {
  if (epoch < 0 || epoch >= total_epochs) {
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total_epochs) + ")");
  }
  if (warmup_epochs >= total_epochs) {
    throw ConfigError("lr_at: warmup_epochs must be smaller than total_epochs");
  }
  if (epoch < warmup_epochs) {
    const double frac = static_cast<double>(epoch) / static_cast<double>(warmup_epochs);
    return warmup_start_lr + (base_lr - warmup_start_lr) * frac;
  }
  const double progress = static_cast<double>(epoch - warmup_epochs) /
                          static_cast<double>(total_epochs - warmup_epochs);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dasvit
