// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alitok/ar/model.hpp"
#include "alitok/core/rng.hpp"

namespace alitok::ar {

struct SamplingConfig {
  double temperature = 0.95;
  bool use_cfg = false;
  double guidance = 1.0;
  double scaler_power = 1.0;
  bool use_cache = true;

  void validate() const;
};

/// Below this temperature sampling is an exact argmax.
inline constexpr double kTemperatureFloor = 1e-6;

/// 1 + (G - 1) * (1 - cos(pi * (t / (T - 1))^p)) / 2; G when T == 1.
double cfg_schedule(std::int64_t t, std::int64_t total, double guidance, double power);

/// (1 - g) * uncond + g * cond, which returns cond at g = 1 and uncond at g = 0 exactly.
std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double g);

/// Draws from softmax(logits / temperature) by inverse CDF; argmax below the floor.
std::int64_t sample_categorical(std::span<const double> logits, double temperature, Rng& rng);

/// Autoregressive decoding state for a batch of class-conditioned samples. With
/// CFG the null-class rows run alongside the conditional rows in one batch.
class GenerationSession {
 public:
  GenerationSession(const ARModel& model, std::vector<int> classes, SamplingConfig cfg, std::uint64_t seed);

  /// Feeds the previous token (the class token on the first call) and draws the
  /// next token of every sample.
  std::vector<std::int64_t> step();
  /// Runs step() until every sequence is complete.
  void run();

  std::int64_t steps_done() const { return steps_; }
  bool done() const { return steps_ == model_.cfg.seq_len(); }
  std::int64_t batch() const { return static_cast<std::int64_t>(classes_.size()); }
  /// Row-major [batch, steps_done()].
  std::vector<std::int64_t> tokens() const;
  /// Conditional and unconditional (CFG only) logits of the last step, one row per sample.
  const std::vector<std::vector<double>>& cond_logits() const { return cond_; }
  const std::vector<std::vector<double>>& uncond_logits() const { return uncond_; }
  /// Guided, pre-temperature logits of the last step.
  const std::vector<std::vector<double>>& guided_logits() const { return guided_; }
  const std::vector<nn::LayerKVCache>& caches() const { return caches_; }

 private:
  Tensor next_logits();

  const ARModel& model_;
  std::vector<int> classes_;
  SamplingConfig cfg_;
  Rng rng_;
  std::vector<nn::LayerKVCache> caches_;
  std::vector<std::vector<std::int64_t>> seqs_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<double>> cond_, uncond_, guided_;
};

/// Samples one sequence per class id; tokens are row-major [classes.size(), seq_len].
std::vector<std::int64_t> generate(const ARModel& model, std::span<const int> classes, const SamplingConfig& cfg,
                                   std::uint64_t seed, double* seconds = nullptr);

struct BenchResult {
  std::int64_t seq_len = 0, batch = 0;
  double cached_s = 0, uncached_s = 0, speedup = 0;
  bool identical = false;
};

/// Times generation of `batch` samples with and without the KV cache.
BenchResult bench_cache(const ARModel& model, int batch, const SamplingConfig& cfg, std::uint64_t seed);

}  // namespace alitok::ar
