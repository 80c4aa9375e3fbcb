// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "alitok/ar/model.hpp"
#include "alitok/tokenizer/tokenizer.hpp"

namespace alitok::analysis {

using ad::Tensor;

struct AsymmetryReport {
  /// Mean 3x3 neighbourhood attention, [dy + 1][dx + 1]; the centre is the token itself.
  std::array<std::array<double, 3>, 3> mean_grid{};
  /// Same grid per head.
  std::vector<std::array<std::array<double, 3>, 3>> per_head;
  /// Mass on {up-left, up, up-right, left} over mass on all 8 neighbours.
  double causal_share = 0;
};

/// Averages the local 3x3 attention of every grid token. `attention` holds
/// [batch, heads, S, S] maps; grid token i sits at slot grid_offset + i. Each
/// token's available cells are renormalised to sum to one before averaging.
AsymmetryReport attention_asymmetry(const std::vector<Tensor>& attention, std::int64_t grid_offset, int grid_h,
                                    int grid_w);

/// Runs the chosen decoder (1 or 2) of a tokenizer on `images` and reports the
/// asymmetry of the selected layers (negative indices count from the end).
AsymmetryReport decoder_asymmetry(const tok::TokenizerModel& m, const data::ImageSet& images, int stage,
                                  const std::vector<int>& layers = {-1}, int chunk = 16);

/// Pixel MSE of the first patch row and of the remaining rows.
std::pair<double, double> first_row_error(const tok::TokenizerModel& m, const data::ImageSet& images, int stage);
/// Same split for explicit [n, h, w, 3] target and reconstruction tensors.
std::pair<double, double> first_row_error(const Tensor& target, const Tensor& recon, int patch);

struct AblationRow {
  std::string label;
  std::uint64_t seed = 0;
  double ar_loss = 0, ar_accuracy = 0;
  double recon_mse = 0, first_row_mse = 0, rest_mse = 0;
  double utilization = 0;
  double causal_share = 0;
  /// Row F: eval-set indices are bit-identical before and after stage 2.
  bool indices_stable = true;
};

struct AblationBudget {
  tok::TokConfig tokenizer{};
  tok::TrainConfig tok_train{};
  long stage2_steps = 0;
  ar::ARConfig ar{};
  ar::ARTrainConfig ar_train{};
  std::vector<std::uint64_t> seeds{0};
  /// Worker threads for independent seeds; results are ordered by seed then label.
  int threads = 1;
};

/// Tokenizer configurations of the ablation rows. A: bidirectional decoder,
/// B: causal decoder, C: B plus prefix tokens, D: C plus the first-row losses.
/// Row F is D followed by stage-2 training.
tok::TokConfig ablation_config(const tok::TokConfig& base, char row);

/// Rows A, B, C, D, F for every seed. Each row trains its tokenizer on `train`,
/// encodes `train` and trains an AR model on the tokens; reconstruction and
/// attention metrics use `eval`. F reuses D's tokens, so its AR metrics equal D's.
std::vector<AblationRow> ablation_suite(const data::ImageSet& train, const data::ImageSet& eval,
                                        const AblationBudget& budget,
                                        const std::function<void(const std::string&)>& progress = {});

ar::TokenDataset token_dataset(const tok::TokenizerModel& m, const data::ImageSet& images, int classes);

const char* ablation_header();
std::string ablation_row_csv(const AblationRow& r);

}  // namespace alitok::analysis
