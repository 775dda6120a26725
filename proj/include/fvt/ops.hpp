#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real s);

// Trailing-suffix broadcast: b's shape must equal the last b.rank() dims of x.
// Covers bias vectors against matrices and positional tables against batches.
Tensor add_broadcast(const Tensor& x, const Tensor& b);
Tensor mul_broadcast(const Tensor& x, const Tensor& b);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// x[..., k] * w[k, n] (+ bias[n]) -> [..., n]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
// Stacks `n` copies of x along a new leading axis.
Tensor repeat_leading(const Tensor& x, std::size_t n);

// Full reductions to a shape-[1] scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Rows of a [n, d] table selected by index -> [indices.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

inline constexpr real kLayerNormEps = real(1e-5);
inline constexpr real kRmsNormEps = real(1e-6);

Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias,
                  real eps = kLayerNormEps);
Tensor rms_norm(const Tensor& x, const Tensor& weight, real eps = kRmsNormEps);

// Exact erf form x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);

// Row-major GEMM on raw buffers: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          real alpha, const real* a, const real* b, real beta, real* c);

}  // namespace FVT_NS
}  // namespace fvt
