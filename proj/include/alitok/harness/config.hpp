// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "alitok/analysis/analysis.hpp"
#include "alitok/ar/model.hpp"
#include "alitok/ar/sampler.hpp"
#include "alitok/data/images.hpp"
#include "alitok/tokenizer/tokenizer.hpp"

namespace alitok::harness {

inline constexpr int kConfigVersion = 1;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StageTrain {
  long steps = 1000;
  int batch = 8;
  OptimizerConfig optim{};
};

struct AblationSettings {
  long tok_steps = 3000;
  long stage2_steps = 3000;
  long ar_steps = 5000;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

/// Everything a run needs. AR vocab, classes, prefix and grid are derived from
/// the tokenizer and data sections.
struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  data::SyntheticSpec data{};
  /// Held-out split: same classes, size and noise as `data`, own count and seed.
  int eval_images_per_class = 8;
  std::uint64_t eval_seed = 99;
  tok::TokConfig tokenizer{};
  StageTrain tok_train{};
  StageTrain stage2_train{};
  ar::ARConfig ar{};
  StageTrain ar_train{1000, 16, {}};
  ar::SamplingConfig sampling{};
  AblationSettings ablation{};
  /// Decoder layers averaged by attn-stats; negative indices count from the end.
  std::vector<int> attention_layers{-1};

  data::SyntheticSpec eval_spec() const;
  /// ar with vocab, classes, prefix and grid filled from the other sections.
  ar::ARConfig ar_config() const;
  tok::TrainConfig tok_train_config(int stage) const;
  ar::ARTrainConfig ar_train_config() const;
  analysis::AblationBudget ablation_budget(int threads) const;
  /// Checks every section and their agreement; throws ConfigError.
  void validate() const;
};

/// Parses and validates JSON text. Unknown keys and wrong types are rejected;
/// absent keys keep their defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& c);

std::string tok_config_json(const tok::TokConfig& c);
tok::TokConfig parse_tok_config(const std::string& text);
std::string ar_config_json(const ar::ARConfig& c);
ar::ARConfig parse_ar_config(const std::string& text);

}  // namespace alitok::harness
