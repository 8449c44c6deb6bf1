#pragma once

#include <span>

#include "sparsemem/tensor.hpp"

namespace smem {

// Free-function tensor ops. Each records a backward closure on the active
// GradTape when any differentiable input requires grad. Shape violations
// throw ShapeError, bad ids throw IndexError.

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);  // -> scalar
Tensor reshape(const Tensor& a, const Shape& s);

Tensor gelu(const Tensor& a);  // exact erf form, elementwise

// Rank-1 softmax with max-subtraction; outputs sum to 1.
Tensor softmax(const Tensor& v);

// C[i,j] = sum_t A[i,t] * B[t,j]
Tensor matmul(const Tensor& a, const Tensor& b);

// y = W x for W [m x n], x [n] -> [m]
Tensor matvec(const Tensor& w, const Tensor& x);

// Y = X W^T for X [n x d_in], W [d_out x d_in] -> [n x d_out]
Tensor linear(const Tensor& x, const Tensor& w);

// Row-wise RMS normalization with a learned gain: y = (x / rms(x)) .* g.
// Accepts rank 1 (one row) or rank 2.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Rows of `table` gathered by id; backward scatter-adds.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Mean negative log-softmax probability of the targets.
// logits [n x v], targets[i] < v.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Weighted mean: sum_i w_i * nll_i / sum_i w_i. Used to restrict the loss
// to answer or non-pad positions. sum(w) must be positive.
Tensor cross_entropy_weighted(const Tensor& logits, std::span<const int> targets,
                              std::span<const double> weights);

// Fused multi-head causal self-attention over a flattened token batch.
// q, k, v are [batch*seq_len x d]; head h of sequence b attends over
// columns [h*dh, (h+1)*dh) of rows [b*seq_len, (b+1)*seq_len). Scores are
// scaled by 1/sqrt(dh); strictly-future positions are masked.
Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  Index batch, Index seq_len, int heads);

}  // namespace smem
