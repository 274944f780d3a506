#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "vidt/tensor.hpp"

// Differentiable primitives. Every op validates shapes, records itself on the
// active tape when an input requires gradients, and accumulates into input
// gradients on backward.
namespace vidt::ops {

// Matrix products. matmul takes [m x k] . [k x n]; bmm takes [B x m x k] .
// [B x k x n], or [B x n x k] when transpose_b is set.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x[..., in] . w[in x out] + b[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real value);
Tensor neg(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor pow_scalar(const Tensor& x, Real exponent);
Tensor sigmoid(const Tensor& x);
// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Tensor inverse_sigmoid(const Tensor& x, Real eps = 1e-5);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor clamp(const Tensor& x, Real lo, Real hi);
Tensor clamp_min(const Tensor& x, Real lo);

// Row-wise ops over the last dimension. Slices that are entirely -inf give a
// zero row from softmax.
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
// Euclidean norm of each last-dim slice; the subgradient at zero is zero.
Tensor norm_lastdim(const Tensor& x);
Tensor sum_lastdim(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& x);  // rank-2 only
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Selects rows along axis 0; index -1 yields a zero row. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index);

// Samples map[h x w x c] at normalized points[n x 2] holding (x, y) in
// [0, 1]; pixel centers sit at ((j + 0.5) / w, (i + 0.5) / h). Out-of-range
// neighbours read as zero. Differentiable in both map values and points.
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

Tensor dropout(const Tensor& x, Real p, std::mt19937_64& rng);
// Same values, cut from the tape.
Tensor detach(const Tensor& x);

}  // namespace vidt::ops
