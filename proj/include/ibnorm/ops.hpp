#pragma once

#include "ibnorm/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

// Differentiable primitives. Elementwise binary ops require identical shapes;
// use broadcast_to explicitly. Axis arguments accept negative values.
namespace ibn {

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
/// Throws ContractError on any zero denominator.
Tensor div(const Tensor &a, const Tensor &b);

Tensor scale(const Tensor &x, double factor);
Tensor add_scalar(const Tensor &x, double value);

/// [m,k]x[k,n], or batched [b,m,k]x[b,k,n].
Tensor matmul(const Tensor &a, const Tensor &b);

Tensor sum_axis(const Tensor &x, std::ptrdiff_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor &x, std::ptrdiff_t axis, bool keepdim = false);
/// Population variance (divides by the axis length).
Tensor var_axis(const Tensor &x, std::ptrdiff_t axis, bool keepdim = false);
Tensor sum_all(const Tensor &x);
Tensor mean_all(const Tensor &x);

Tensor sqrt(const Tensor &x);
Tensor abs(const Tensor &x);
/// sign(0) = 0; treated as locally constant by backward.
Tensor sign(const Tensor &x);
Tensor tanh(const Tensor &x);
Tensor ln1p(const Tensor &x);
Tensor exp(const Tensor &x);
Tensor relu(const Tensor &x);

Tensor softmax_axis(const Tensor &x, std::ptrdiff_t axis);
Tensor log_softmax_last(const Tensor &x);

/// Right-aligned broadcast; each source dim must be 1 or equal the target.
Tensor broadcast_to(const Tensor &x, const Shape &shape);
Tensor reshape(const Tensor &x, Shape shape);
Tensor permute(const Tensor &x, const std::vector<std::size_t> &axes);
/// Swap the last two axes.
Tensor transpose(const Tensor &x);

/// Rows of a [n,d] table: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor &table, std::span<const std::size_t> ids);
/// Per-row element of a [n,c] tensor: out[i] = x[i, ids[i]].
Tensor pick(const Tensor &x, std::span<const std::size_t> ids);

/// Mean negative log-likelihood of `targets` under row-wise logits [n,c].
Tensor cross_entropy(const Tensor &logits, std::span<const std::size_t> targets);

} // namespace ibn
