// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "alitok/core/optim.hpp"
#include "alitok/core/params.hpp"
#include "alitok/nn/blocks.hpp"

namespace alitok::ar {

using ad::Tensor;

struct ARConfig {
  int vocab = 64;
  int classes = 8;
  /// Prefix tokens (1-D positions) followed by a grid_h x grid_w raster grid (2-D positions).
  int prefix = 8;
  int grid_h = 8;
  int grid_w = 8;
  nn::BlockConfig block{128, 4, 4.0, true, 1e-6};
  int depth = 4;
  double drop_prob = 0.1;
  double init_std = 0.02;

  int null_class() const { return classes; }
  int seq_len() const { return prefix + grid_h * grid_w; }
  void validate() const;
  /// Rotary coordinates of the seq_len input slots: slot 0 (class) has none,
  /// slot 1 + j carries token j's position.
  nn::RopeConfig rope() const;
};

/// Parameters: "ar.tok_embed" [V, w], "ar.class_embed" [C + 1, w], "ar.blocks.*",
/// "ar.out_norm" [w], "ar.head" [w, V].
struct ARModel {
  ARConfig cfg;
  ParamStore params;
  nn::Stack stack;
  nn::RopeConfig rope;

  static ARModel create(const ARConfig& cfg, std::uint64_t seed, ad::DType dt = ad::DType::F32);
  ad::DType dtype() const { return params.dtype(); }
};

/// Class-labelled token sequences, row-major [count, seq_len].
struct TokenDataset {
  int seq_len = 0;
  int vocab = 0;
  int classes = 0;
  std::vector<std::int64_t> tokens;
  std::vector<int> labels;

  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
  void validate() const;
};

/// Embeddings [batch, 1 + n, w]: class token, then the first n tokens of each row.
/// `tokens` holds batch rows of `row_len` ids.
Tensor embed_inputs(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens,
                    std::int64_t row_len, std::int64_t n);
/// Token embeddings [batch, 1, w] for one id per row.
Tensor embed_step(const ARModel& m, std::span<const std::int64_t> ids);
/// Runs the causal stack on inputs occupying slots [first_slot, first_slot + S).
/// With caches, first_slot must equal the cache length. Returns logits [batch, S, V].
Tensor run_stack(const ARModel& m, const Tensor& x, std::vector<nn::LayerKVCache>* caches = nullptr);

/// Teacher-forced logits [batch, seq_len, V]; row i predicts token i.
Tensor ar_forward(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens);

struct StepResult {
  Tensor loss;
  double accuracy = 0;
  std::vector<int> used_classes;
};

/// Mean cross-entropy over every predicted position after replacing each class
/// by the null class with probability drop_prob.
StepResult ar_loss(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens, Rng& rng,
                   double drop_prob);

/// Fraction of rows whose argmax (lowest index on ties) equals the target.
double argmax_accuracy(const Tensor& logits, std::span<const std::int64_t> targets);

struct ARTrainConfig {
  long steps = 1000;
  int batch = 16;
  std::uint64_t seed = 0;
  OptimizerConfig optim{};
};

struct ARMetrics {
  long step;
  double loss, accuracy, lr;
};

std::vector<ARMetrics> train_ar(ARModel& m, const TokenDataset& ds, const ARTrainConfig& tc,
                                const std::function<void(const ARMetrics&)>& on_step = {});

struct AREval {
  double loss = 0, accuracy = 0;
};
/// Teacher-forced loss and accuracy with true class labels over the whole set.
AREval evaluate_ar(const ARModel& m, const TokenDataset& ds, int chunk = 32);

const char* metrics_header();
std::string metrics_row(const ARMetrics& r);

}  // namespace alitok::ar
