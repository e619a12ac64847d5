#pragma once

// Central finite-difference oracle. It only ever calls the forward function
// with perturbed leaf values, so it is independent of every backward rule.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dasvit/ops.hpp"
#include "dasvit/rng.hpp"
#include "dasvit/tensor.hpp"

namespace dasvit::oracle {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool grad = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, scale);
  t.set_requires_grad(grad);
  return t;
}

// Norm-wise relative error ||a - n|| / (||a|| + ||n||), with both sides
// vanishing treated as agreement.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0;
  double na = 0.0;
  double nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  if (denom < 1e-300) return 0.0;
  return std::sqrt(diff) / denom;
}

using ScalarFn = std::function<Tensor()>;

inline std::vector<double> numeric_grad(const ScalarFn& f, Tensor leaf, double h = 1e-5) {
  NoGradGuard guard;
  std::vector<double> g(leaf.numel());
  auto values = leaf.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = f().item();
    values[i] = orig - h;
    const double down = f().item();
    values[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Worst relative error over all leaves between backward() and finite
// differences of f.
inline double gradcheck(const ScalarFn& f, std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  f().backward();
  double worst = 0.0;
  for (auto& l : leaves) {
    std::vector<double> analytic(l.numel(), 0.0);
    if (l.has_grad()) analytic.assign(l.grad().begin(), l.grad().end());
    worst = std::max(worst, relative_error(analytic, numeric_grad(f, l, h)));
  }
  return worst;
}

// sum(y * r) for a fixed random r, so every output element carries a
// distinct weight into the scalar.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor r(y.shape());
  for (auto& v : r.mutable_data()) v = rng.normal();
  return ops::sum(ops::mul(y, r));
}

}  // namespace dasvit::oracle
