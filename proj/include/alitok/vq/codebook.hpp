// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alitok/autodiff/ops.hpp"
#include "alitok/core/rng.hpp"

namespace alitok::vq {

using ad::Tensor;

/// V code vectors of dimension d_c plus an EMA of how often each is chosen.
struct Codebook {
  Tensor vectors;  // [V, d_c], a trainable leaf
  std::vector<double> usage_ema;

  /// Wraps an existing [V, d_c] leaf; usage starts uniform at 1/V.
  static Codebook wrap(Tensor vectors);

  std::int64_t size() const { return vectors.dim(0); }
  std::int64_t dim() const { return vectors.dim(1); }
  void validate() const;
};

struct QuantizeResult {
  std::vector<std::int64_t> indices;
  Tensor quantized;   // codebook rows, same shape as z; carries gradient to the codebook
  Tensor ste_output;  // z + stop_gradient(quantized - z)
};

/// Index of the nearest code (squared Euclidean distance) for every row of
/// z [..., d_c]; ties go to the lowest index.
std::vector<std::int64_t> nearest_codes(const Tensor& z, const Tensor& codes);

QuantizeResult quantize(const Tensor& z, const Codebook& cb);

/// mean over rows of |sg(z) - q|^2 + beta |z - sg(q)|^2.
Tensor quant_loss(const Tensor& z, const QuantizeResult& result, double beta);

struct ReinitReport {
  int count = 0;
  std::vector<std::int64_t> rows;
};

/// usage <- decay * usage + (1 - decay) * batch frequency; every code whose usage
/// falls below threshold is overwritten with a row of batch_z drawn uniformly and
/// its usage reset to 1/V.
ReinitReport update_usage_and_reinit(Codebook& cb, std::span<const std::int64_t> batch_indices, const Tensor& batch_z,
                                     double decay, double threshold, Rng& rng);

/// Fraction of the V codes that appear in corpus.
double utilization(std::int64_t vocab, std::span<const std::int64_t> corpus);

}  // namespace alitok::vq
