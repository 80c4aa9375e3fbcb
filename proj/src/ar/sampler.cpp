// SPDX-License-Identifier: Apache-2.0
#include "alitok/ar/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace alitok::ar {

void SamplingConfig::validate() const {
  if (!(temperature > 0)) throw std::invalid_argument("sampling: temperature must be > 0");
  if (use_cfg && !(guidance >= 1)) throw std::invalid_argument("sampling: guidance scale must be >= 1");
  if (use_cfg && !(scaler_power > 0)) throw std::invalid_argument("sampling: scaler power must be > 0");
}

double cfg_schedule(std::int64_t t, std::int64_t total, double guidance, double power) {
  if (total < 1 || t < 0 || t >= total) throw std::out_of_range("cfg_schedule: step outside [0, T)");
  if (total == 1) return guidance;
  const double x = std::pow(static_cast<double>(t) / static_cast<double>(total - 1), power);
  return 1.0 + (guidance - 1.0) * (1.0 - std::cos(std::numbers::pi * x)) / 2.0;
}

std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double g) {
  if (cond.size() != uncond.size())
    throw ad::ShapeError("cfg_combine: " + std::to_string(cond.size()) + " vs " + std::to_string(uncond.size()) +
                         " logits");
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - g) * uncond[i] + g * cond[i];
  return out;
}

std::int64_t sample_categorical(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("sample: empty logits");
  const auto argmax = std::max_element(logits.begin(), logits.end()) - logits.begin();
  if (temperature < kTemperatureFloor) return argmax;
  const double mx = logits[static_cast<std::size_t>(argmax)];
  std::vector<double> cdf(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += std::exp((logits[i] - mx) / temperature);
    cdf[i] = total;
  }
  const double u = rng.uniform() * total;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return it == cdf.end() ? static_cast<std::int64_t>(cdf.size()) - 1 : it - cdf.begin();
}

GenerationSession::GenerationSession(const ARModel& model, std::vector<int> classes, SamplingConfig cfg,
                                     std::uint64_t seed)
    : model_(model), classes_(std::move(classes)), cfg_(cfg), rng_(seed), seqs_(classes_.size()) {
  cfg_.validate();
  if (classes_.empty()) throw std::invalid_argument("generation: empty batch");
  for (int c : classes_)
    if (c < 0 || c > model_.cfg.null_class()) throw std::out_of_range("generation: class id " + std::to_string(c));
  if (cfg_.use_cache) {
    const auto rows = batch() * (cfg_.use_cfg ? 2 : 1);
    const auto& b = model_.cfg.block;
    for (int l = 0; l < model_.cfg.depth; ++l)
      caches_.emplace_back(model_.dtype(), rows, b.heads, model_.cfg.seq_len(), b.head_dim());
  }
}

std::vector<std::int64_t> GenerationSession::tokens() const {
  std::vector<std::int64_t> out;
  for (const auto& s : seqs_) out.insert(out.end(), s.begin(), s.end());
  return out;
}

Tensor GenerationSession::next_logits() {
  std::vector<int> row_classes = classes_;
  if (cfg_.use_cfg) row_classes.insert(row_classes.end(), classes_.size(), model_.cfg.null_class());
  const auto rows = static_cast<std::size_t>(row_classes.size());
  std::vector<std::int64_t> last(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& s = seqs_[r % seqs_.size()];
    if (!s.empty()) last[r] = s.back();
  }
  if (cfg_.use_cache) {
    if (caches_.front().length() != steps_)
      throw std::logic_error("generation: cache holds " + std::to_string(caches_.front().length()) +
                             " slots after " + std::to_string(steps_) + " steps");
    Tensor x = steps_ == 0 ? embed_inputs(model_, row_classes, {}, 0, 0) : embed_step(model_, last);
    return ad::slice(run_stack(model_, x, &caches_), 1, 0, 1);
  }
  std::vector<std::int64_t> flat;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& s = seqs_[r % seqs_.size()];
    flat.insert(flat.end(), s.begin(), s.end());
  }
  Tensor x = embed_inputs(model_, row_classes, flat, steps_, steps_);
  return ad::slice(run_stack(model_, x), 1, steps_, 1);
}

std::vector<std::int64_t> GenerationSession::step() {
  if (done()) throw std::logic_error("generation: sequence already complete");
  ad::NoGradGuard guard;
  const auto v = static_cast<std::size_t>(model_.cfg.vocab);
  const auto logits = next_logits().to_vector();
  const auto n = classes_.size();
  const double g = cfg_.use_cfg ? cfg_schedule(steps_, model_.cfg.seq_len(), cfg_.guidance, cfg_.scaler_power) : 1.0;
  cond_.assign(n, {});
  uncond_.assign(cfg_.use_cfg ? n : 0, {});
  guided_.assign(n, {});
  std::vector<std::int64_t> drawn(n);
  for (std::size_t b = 0; b < n; ++b) {
    cond_[b].assign(logits.begin() + static_cast<std::ptrdiff_t>(b * v),
                    logits.begin() + static_cast<std::ptrdiff_t>((b + 1) * v));
    if (cfg_.use_cfg) {
      uncond_[b].assign(logits.begin() + static_cast<std::ptrdiff_t>((n + b) * v),
                        logits.begin() + static_cast<std::ptrdiff_t>((n + b + 1) * v));
      guided_[b] = cfg_combine(cond_[b], uncond_[b], g);
    } else {
      guided_[b] = cond_[b];
    }
    drawn[b] = sample_categorical(guided_[b], cfg_.temperature, rng_);
    seqs_[b].push_back(drawn[b]);
  }
  ++steps_;
  return drawn;
}

void GenerationSession::run() {
  while (!done()) step();
}

std::vector<std::int64_t> generate(const ARModel& model, std::span<const int> classes, const SamplingConfig& cfg,
                                   std::uint64_t seed, double* seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  GenerationSession s(model, std::vector<int>(classes.begin(), classes.end()), cfg, seed);
  s.run();
  if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s.tokens();
}

BenchResult bench_cache(const ARModel& model, int batch, const SamplingConfig& cfg, std::uint64_t seed) {
  if (batch < 1) throw std::invalid_argument("bench: batch must be >= 1");
  std::vector<int> classes(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) classes[static_cast<std::size_t>(b)] = b % model.cfg.classes;
  SamplingConfig on = cfg, off = cfg;
  on.use_cache = true;
  off.use_cache = false;
  BenchResult r;
  r.seq_len = model.cfg.seq_len();
  r.batch = batch;
  const auto a = generate(model, classes, on, seed, &r.cached_s);
  const auto b = generate(model, classes, off, seed, &r.uncached_s);
  r.speedup = r.uncached_s / r.cached_s;
  r.identical = a == b;
  return r;
}

}  // namespace alitok::ar
