// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "alitok/autodiff/tensor.hpp"

namespace alitok {

struct OptimizerConfig {
  double base_lr = 1e-4;
  double min_lr = 1e-5;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
};

/// Linear warmup to base_lr, then cosine decay to min_lr at the final step.
double lr_at(const OptimizerConfig& cfg, long step, long total_steps);

/// Adaptive moment estimation over a fixed list of leaves.
class Adam {
 public:
  Adam(std::vector<ad::Tensor> params, OptimizerConfig cfg);

  /// Applies one update with the given learning rate and clears gradients.
  /// Leaves without a gradient are skipped. Returns the pre-clip gradient norm.
  double step(double lr);
  /// Forgets the moment estimates of one row of a 2-D parameter.
  void reset_row(const ad::Tensor& param, std::int64_t row);

  long steps_taken() const { return t_; }

 private:
  std::vector<ad::Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace alitok
