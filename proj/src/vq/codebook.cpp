// SPDX-License-Identifier: Apache-2.0
#include "alitok/vq/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace alitok::vq {

Codebook Codebook::wrap(Tensor vectors) {
  Codebook cb;
  cb.vectors = std::move(vectors);
  cb.validate();
  cb.usage_ema.assign(static_cast<std::size_t>(cb.size()), 1.0 / static_cast<double>(cb.size()));
  return cb;
}

void Codebook::validate() const {
  if (vectors.rank() != 2 || vectors.dim(0) < 2)
    throw std::invalid_argument("codebook: need at least 2 codes, got " + ad::shape_str(vectors.shape()));
  if (!vectors.data().all_finite()) throw ad::NonFiniteError("codebook: non-finite code vector");
}

std::vector<std::int64_t> nearest_codes(const Tensor& z, const Tensor& codes) {
  const auto d = codes.dim(1), v = codes.dim(0);
  if (z.dim(-1) != d)
    throw ad::ShapeError("quantize: code dim " + std::to_string(d) + " vs input " + ad::shape_str(z.shape()));
  if (!z.data().all_finite()) throw ad::NonFiniteError("quantize: non-finite encoder output");
  const auto rows = z.numel() / d;
  std::vector<std::int64_t> out(static_cast<std::size_t>(rows));
  ad::dispatch(z.dtype(), [&]<class T>() {
    auto zv = z.values<T>();
    auto cv = codes.values<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      double best = std::numeric_limits<double>::infinity();
      std::int64_t arg = 0;
      for (std::int64_t k = 0; k < v; ++k) {
        double dist = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double diff = static_cast<double>(zv[r * d + j]) - static_cast<double>(cv[k * d + j]);
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          arg = k;
        }
      }
      out[static_cast<std::size_t>(r)] = arg;
    }
  });
  return out;
}

QuantizeResult quantize(const Tensor& z, const Codebook& cb) {
  QuantizeResult r;
  r.indices = nearest_codes(z, cb.vectors);
  r.quantized = ad::reshape(ad::gather_rows(cb.vectors, r.indices), z.shape());
  r.ste_output = ad::add(z, ad::detach(ad::sub(r.quantized, z)));
  return r;
}

Tensor quant_loss(const Tensor& z, const QuantizeResult& result, double beta) {
  if (beta < 0) throw std::invalid_argument("quant_loss: beta must be non-negative");
  // mse averages over rows * d_c; scale back to a per-row squared norm.
  const double d = static_cast<double>(z.dim(-1));
  Tensor codebook_term = ad::mse(ad::detach(z), result.quantized);
  Tensor commit_term = ad::mse(z, ad::detach(result.quantized));
  return ad::scale(ad::add(codebook_term, ad::scale(commit_term, beta)), d);
}

ReinitReport update_usage_and_reinit(Codebook& cb, std::span<const std::int64_t> batch_indices, const Tensor& batch_z,
                                     double decay, double threshold, Rng& rng) {
  if (!(decay > 0 && decay < 1)) throw std::invalid_argument("update_usage: decay must lie in (0, 1)");
  if (batch_indices.empty()) throw std::invalid_argument("update_usage: empty batch");
  const auto v = cb.size(), d = cb.dim();
  if (batch_z.dim(-1) != d) throw ad::ShapeError("update_usage: batch_z dim mismatch " + ad::shape_str(batch_z.shape()));
  std::vector<double> freq(static_cast<std::size_t>(v), 0.0);
  for (auto i : batch_indices) freq.at(static_cast<std::size_t>(i)) += 1.0;
  const double n = static_cast<double>(batch_indices.size());
  for (std::size_t k = 0; k < freq.size(); ++k)
    cb.usage_ema[k] = decay * cb.usage_ema[k] + (1.0 - decay) * (freq[k] / n);

  ReinitReport report;
  const auto rows = batch_z.numel() / d;
  auto src = batch_z.to_vector();
  for (std::int64_t k = 0; k < v; ++k) {
    if (cb.usage_ema[static_cast<std::size_t>(k)] >= threshold) continue;
    const auto pick = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(rows)));
    ad::dispatch(cb.vectors.dtype(), [&]<class T>() {
      auto dst = cb.vectors.mutable_values<T>();
      for (std::int64_t j = 0; j < d; ++j) dst[k * d + j] = static_cast<T>(src[static_cast<std::size_t>(pick * d + j)]);
    });
    cb.usage_ema[static_cast<std::size_t>(k)] = 1.0 / static_cast<double>(v);
    report.rows.push_back(k);
    ++report.count;
  }
  return report;
}

double utilization(std::int64_t vocab, std::span<const std::int64_t> corpus) {
  if (corpus.empty()) throw std::invalid_argument("utilization: empty corpus");
  std::vector<bool> seen(static_cast<std::size_t>(vocab), false);
  for (auto i : corpus) seen.at(static_cast<std::size_t>(i)) = true;
  return static_cast<double>(std::count(seen.begin(), seen.end(), true)) / static_cast<double>(vocab);
}

}  // namespace alitok::vq
