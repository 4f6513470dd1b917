#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cilmp/tensor.hpp"

// Differentiable primitives. Unless noted, ops treat tensors through their
// 2-D row view (rank-1 tensors are a single row) and require exact shape
// agreement: there is no broadcasting beyond the explicit scalar and row ops.
namespace cilmp::ops {

// Matrix product of rank-2 tensors [m x k] . [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a . b^T for rank-2 tensors [m x k], [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x * s for a scalar tensor s (shape {1} or {}).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor add_scalar(const Tensor& x, double value);
// Adds a [cols] (or [1 x cols]) row to every row of x.
Tensor add_rowwise(const Tensor& x, const Tensor& row);

Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
// Concatenates along axis 0 (rows) or axis 1 (columns) of the 2-D view.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
// Half-open range [begin, end) along axis 0 or 1 of the 2-D view.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
// Output row i = input row index[i]; gradient scatter-adds.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor sum_cols(const Tensor& a);  // [rows] : sum over each row
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

inline constexpr double kNormEpsilon = 1e-12;

// Unit Euclidean norm; throws DegenerateInputError when the norm is <= 1e-12.
Tensor l2_normalize(const Tensor& v);
// Normalises every row of the 2-D view independently.
Tensor normalize_rows(const Tensor& a);
Tensor softmax_rows(const Tensor& logits);
// Mean over rows of -log softmax(logits)[row, target]; log-sum-exp stabilised.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);
// Row-wise layer normalisation with learnable gain and bias of width cols.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Single-head scaled dot-product attention over a stack of equal-length
// segments. q, k, v are [(segments*segment_len) x d]; attention never
// crosses segment boundaries. With causal set, position t attends to <= t.
Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::size_t segment_len, bool causal);

// Central-difference check of an analytic gradient.
//
// `loss` rebuilds the scalar graph from `params` on every call. Returns the
// largest |analytic - numeric| / max(1, |analytic|) over every coordinate.
double gradient_check(const std::function<Tensor()>& loss, std::span<Tensor> params,
                      double step = 1e-5);

}  // namespace cilmp::ops
