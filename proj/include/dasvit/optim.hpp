#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dasvit/tensor.hpp"

namespace dasvit {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

// AdamW with decoupled weight decay: the parameter itself is shrunk by
// lr * weight_decay before the bias-corrected Adam update is applied.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamWConfig config);

  // Throws if any parameter has no gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  const AdamWConfig& config() const { return config_; }

  const std::vector<NamedParam>& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  // Replaces the moments; shapes must match the parameters.
  void restore(OptimizerState state);

 private:
  std::vector<NamedParam> params_;
  AdamWConfig config_;
  OptimizerState state_;
};

// Linear warmup from warmup_start_lr to base_lr, then cosine decay to min_lr.
struct LrSchedule {
  double base_lr = 1e-3;
  int warmup_epochs = 0;
  double warmup_start_lr = 1e-6;
  int total_epochs = 1;
  double min_lr = 0.0;

  double lr_at(int epoch) const;
};

}  // namespace dasvit
