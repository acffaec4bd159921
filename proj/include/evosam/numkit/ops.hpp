#pragma once

#include <vector>

#include "evosam/numkit/tape.hpp"

namespace evosam::nk {

// Dense kernels. C is overwritten unless `accumulate` is set.
// nn: C(m,n) = A(m,k) B(k,n); tn: C(m,n) = A(k,m)^T B(k,n); nt: C(m,n) = A(m,k) B(n,k)^T.
void gemm_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate = false);
void gemm_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate = false);
void gemm_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate = false);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Row-wise softmax with row-max subtraction.
Tensor softmax_rows(const Tensor& a);

// Differentiable primitives. All operands are 2-D unless stated otherwise.
Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, real s);
/// Adds a length-cols row vector to every row of `a`.
Var add_row(Var a, Var row);
Var softmax_rows(Var a);
/// Per-row normalization with learned gain/bias (each of length cols).
Var layernorm(Var a, Var gain, Var bias, real eps = real(1e-5));
/// Exact (erf) GELU.
Var gelu(Var a);
Var sigmoid(Var a);
Var reshape(Var a, Shape shape);
/// `a` holds an (h*w) x c grid in row-major pixel order; returns the
/// (2h*2w) x c nearest-neighbour upsampled grid.
Var upsample2x(Var a, int h, int w);
/// Per-row dot product of features (n x c) with a length-c vector -> (n x 1).
Var pixel_dot(Var features, Var vec);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, int begin, int count);
Var sum(Var a);
Var mean_sq_diff(Var a, Var b);

/// softmax(Q K^T / sqrt(d/heads)) V computed per head on column blocks and
/// concatenated back to n x d.
Var multihead_attention(Var q, Var k, Var v, int heads);

}  // namespace evosam::nk
