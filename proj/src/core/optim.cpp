// SPDX-License-Identifier: Apache-2.0
#include "alitok/core/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace alitok {

double lr_at(const OptimizerConfig& cfg, long step, long total_steps) {
  const long warmup = static_cast<long>(std::floor(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long span = std::max(1L, total_steps - warmup - 1);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(std::vector<ad::Tensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

double Adam::step(double lr) {
  ++t_;
  double sq = 0.0;
  for (const auto& p : params_)
    if (p.has_grad())
      for (double g : p.grad_vector()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    ad::dispatch(p.dtype(), [&]<class T>() {
      auto w = p.mutable_values<T>();
      auto g = p.grad().as<T>();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * clip;
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        if (cfg_.weight_decay > 0) upd += cfg_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
      }
    });
    p.zero_grad();
  }
  return norm;
}

void Adam::reset_row(const ad::Tensor& param, std::int64_t row) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (params_[k].node_ptr() != param.node_ptr()) continue;
    const auto width = param.dim(-1);
    std::fill_n(m_[k].begin() + row * width, width, 0.0);
    std::fill_n(v_[k].begin() + row * width, width, 0.0);
    return;
  }
  throw std::invalid_argument("Adam::reset_row: parameter not managed by this optimizer");
}

}  // namespace alitok
