#pragma once

#include <cstddef>
#include <vector>

#include "qssm/tensor.hpp"

// Differentiable tensor operations. Each op records itself on the active tape
// when any input requires grad.
namespace qssm::ops {

enum class OpKind { kAdd, kSub, kMul, kDiv, kExp, kAbs, kSqrt, kClamp };

// Numpy-style broadcast of two shapes (aligned on trailing dimensions).
Shape broadcast_shape(const Shape& a, const Shape& b);

// Generic dispatcher. Binary kinds use `b`; unary kinds ignore it; kClamp reads
// the bounds from `lo`/`hi`.
Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b = {}, double lo = 0.0,
                   double hi = 0.0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

// out[i] = a[index[i]]; the backward scatters-adds. Every index must be < a.numel().
Tensor gather(const Tensor& a, const std::vector<std::size_t>& index, Shape out_shape);

// [m x k] * [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [C_in x H x W], kernel: [C_out x C_in x kh x kw], bias: [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t padding,
              std::size_t stride = 1);

// Normalizes every pixel over the channel axis of [C x H x W].
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           double eps = 1e-5);

// [C x H x W] -> [C x 1 x 1].
Tensor global_avg_pool(const Tensor& x);

// [C*s*s x H x W] -> [C x H*s x W*s].
Tensor pixel_shuffle(const Tensor& x, std::size_t scale);

// Maximum |a-b|; shapes must be equal.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace qssm::ops
