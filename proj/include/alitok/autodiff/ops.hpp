// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alitok/autodiff/tensor.hpp"

// Differentiable primitives. Binary elementwise ops broadcast by aligning
// trailing axes; a size-1 axis (or a missing leading axis) expands.
namespace alitok::ad {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

/// a: [..., m, k]; b: [k, n] or [..., k, n] with identical batch axes.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ over the last two axes. a: [..., m, k]; b: [..., n, k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& a, const std::vector<int>& perm);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);

/// Rows of a [N, d] table selected by ids; result [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);

enum class SoftmaxMask { None, Causal };
/// Softmax over the last axis. With Causal, the last two axes [q, k] form a
/// score matrix where query i sees keys j <= i + (k - q); hidden entries are 0.
Tensor softmax(const Tensor& a, SoftmaxMask mask = SoftmaxMask::None);

Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over the last axis, keeping it as size 1.
Tensor mean_last(const Tensor& a);

Tensor detach(const Tensor& a);

/// x / sqrt(mean(x^2, last axis) + eps).
Tensor rms_normalize(const Tensor& x, double eps);

/// Rotates consecutive channel pairs of x: [..., S, H, D] by angles [S, D/2].
Tensor rotary(const Tensor& x, const Tensor& angles);

/// Mean token cross-entropy. logits: [N, V]; targets: N ids.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);
/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace alitok::ad
