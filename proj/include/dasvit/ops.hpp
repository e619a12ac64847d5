#pragma once

#include <span>
#include <vector>

#include "dasvit/tensor.hpp"

// Differentiable primitives. Every function checks shapes (throwing
// ShapeError naming the primitive and the offending shapes) and rejects
// non-finite results with NumericError.
namespace dasvit::ops {

// Element-wise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

// [..., m, k] x [k, n] -> [..., m, n], or batched [..., m, k] x [..., k, n]
// with identical leading dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// Along the last axis.
Tensor softmax(const Tensor& x);
// Without affine; epsilon is added to the variance.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
// Subgradient at 0 is taken as 0.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Full reductions produce shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduce (and drop) the last axis.
Tensor sum_last(const Tensor& x);
Tensor mean_last(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
// Same index list applied along `axis`.
Tensor index_select(const Tensor& x, int axis, std::span<const std::size_t> indices);
// x: [B, N, C]; rows[b] lists the rows kept for batch element b (equal
// lengths). Result [B, k, C].
Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& rows);
// Flat gather -> shape [indices.size()].
Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices);

// Mean softmax cross-entropy of logits [B, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace dasvit::ops
