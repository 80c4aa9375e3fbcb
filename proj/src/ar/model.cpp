// SPDX-License-Identifier: Apache-2.0
#include "alitok/ar/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace alitok::ar {

void ARConfig::validate() const {
  if (vocab < 2) throw std::invalid_argument("ar: vocab must be >= 2");
  if (classes < 1) throw std::invalid_argument("ar: classes must be >= 1");
  if (prefix < 0 || grid_h < 0 || grid_w < 0 || seq_len() < 1)
    throw std::invalid_argument("ar: sequence layout must contain at least one token");
  if (depth < 1) throw std::invalid_argument("ar: depth must be >= 1");
  if (!(drop_prob >= 0 && drop_prob <= 1)) throw std::invalid_argument("ar: drop_prob must lie in [0, 1]");
  block.validate();
  if (grid_h * grid_w > 0 && block.head_dim() % 4 != 0)
    throw std::invalid_argument("ar: 2-D rotary positions need head_dim divisible by 4");
}

nn::RopeConfig ARConfig::rope() const {
  nn::RopeConfig r;
  r.head_dim = block.head_dim();
  r.positions.push_back({nn::RopeMode::None, 0, 0});
  for (int j = 0; j + 1 < seq_len(); ++j) {
    if (j < prefix) {
      r.positions.push_back({nn::RopeMode::OneD, j, 0});
    } else {
      const int i = j - prefix;
      r.positions.push_back({nn::RopeMode::TwoD, i / grid_w + prefix, i % grid_w + prefix});
    }
  }
  r.validate();
  return r;
}

ARModel ARModel::create(const ARConfig& cfg, std::uint64_t seed, ad::DType dt) {
  cfg.validate();
  ARModel m{cfg, ParamStore(dt), {}, cfg.rope()};
  Rng rng(seed);
  const std::int64_t w = cfg.block.width;
  m.params.add_normal("ar.tok_embed", {cfg.vocab, w}, cfg.init_std, rng);
  m.params.add_normal("ar.class_embed", {cfg.classes + 1, w}, cfg.init_std, rng);
  m.stack = nn::Stack::create(m.params, "ar.blocks", cfg.block, cfg.depth, rng, cfg.init_std);
  m.params.add_ones("ar.out_norm", {w});
  m.params.add_normal("ar.head", {w, cfg.vocab}, cfg.init_std, rng);
  return m;
}

void TokenDataset::validate() const {
  if (seq_len < 1 || vocab < 2 || classes < 1) throw std::invalid_argument("token dataset: bad header");
  if (static_cast<std::int64_t>(tokens.size()) != count() * seq_len)
    throw std::invalid_argument("token dataset: " + std::to_string(tokens.size()) + " tokens for " +
                                std::to_string(count()) + " rows of " + std::to_string(seq_len));
  for (auto t : tokens)
    if (t < 0 || t >= vocab) throw std::out_of_range("token dataset: token id " + std::to_string(t));
  for (auto c : labels)
    if (c < 0 || c > classes) throw std::out_of_range("token dataset: class id " + std::to_string(c));
}

namespace {

void check_classes(const ARConfig& c, std::span<const int> classes) {
  for (int k : classes)
    if (k < 0 || k > c.null_class()) throw std::out_of_range("ar: class id " + std::to_string(k));
}

}  // namespace

Tensor embed_inputs(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens,
                    std::int64_t row_len, std::int64_t n) {
  const auto& c = m.cfg;
  check_classes(c, classes);
  const auto b = static_cast<std::int64_t>(classes.size());
  if (static_cast<std::int64_t>(tokens.size()) != b * row_len || n > row_len)
    throw ad::ShapeError("ar: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(b) +
                         " of row length " + std::to_string(row_len));
  std::vector<std::int64_t> cls(classes.begin(), classes.end());
  Tensor x = ad::reshape(ad::gather_rows(m.params.get("ar.class_embed"), cls), {b, 1, c.block.width});
  if (n == 0) return x;
  std::vector<std::int64_t> ids;
  ids.reserve(static_cast<std::size_t>(b * n));
  for (std::int64_t r = 0; r < b; ++r)
    for (std::int64_t j = 0; j < n; ++j) {
      const auto t = tokens[static_cast<std::size_t>(r * row_len + j)];
      if (t < 0 || t >= c.vocab) throw std::out_of_range("ar: token id " + std::to_string(t));
      ids.push_back(t);
    }
  Tensor toks = ad::reshape(ad::gather_rows(m.params.get("ar.tok_embed"), ids), {b, n, c.block.width});
  return ad::concat({x, toks}, 1);
}

Tensor embed_step(const ARModel& m, std::span<const std::int64_t> ids) {
  for (auto t : ids)
    if (t < 0 || t >= m.cfg.vocab) throw std::out_of_range("ar: token id " + std::to_string(t));
  return ad::reshape(ad::gather_rows(m.params.get("ar.tok_embed"), ids),
                     {static_cast<std::int64_t>(ids.size()), 1, m.cfg.block.width});
}

Tensor run_stack(const ARModel& m, const Tensor& x, std::vector<nn::LayerKVCache>* caches) {
  Tensor h = m.stack.forward(x, nn::MaskKind::Causal, &m.rope, nullptr, caches);
  return ad::matmul(nn::rmsnorm(h, m.params.get("ar.out_norm"), m.cfg.block.eps), m.params.get("ar.head"));
}

Tensor ar_forward(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens) {
  const std::int64_t t = m.cfg.seq_len();
  return run_stack(m, embed_inputs(m, classes, tokens, t, t - 1));
}

double argmax_accuracy(const Tensor& logits, std::span<const std::int64_t> targets) {
  const auto v = logits.dim(-1);
  const auto rows = logits.numel() / v;
  if (static_cast<std::int64_t>(targets.size()) != rows)
    throw ad::ShapeError("accuracy: " + std::to_string(targets.size()) + " targets for " +
                         ad::shape_str(logits.shape()));
  const auto x = logits.to_vector();
  std::int64_t hits = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto* row = x.data() + r * v;
    hits += (std::max_element(row, row + v) - row) == targets[static_cast<std::size_t>(r)];
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

StepResult ar_loss(const ARModel& m, std::span<const int> classes, std::span<const std::int64_t> tokens, Rng& rng,
                   double drop_prob) {
  if (classes.empty()) throw std::invalid_argument("ar: empty batch");
  StepResult r;
  r.used_classes.assign(classes.begin(), classes.end());
  if (drop_prob > 0)
    for (auto& c : r.used_classes)
      if (rng.bernoulli(drop_prob)) c = m.cfg.null_class();
  Tensor logits = ar_forward(m, r.used_classes, tokens);
  Tensor flat = ad::reshape(logits, {-1, m.cfg.vocab});
  r.loss = ad::cross_entropy(flat, tokens);
  r.accuracy = argmax_accuracy(flat, tokens);
  return r;
}

std::vector<ARMetrics> train_ar(ARModel& m, const TokenDataset& ds, const ARTrainConfig& tc,
                                const std::function<void(const ARMetrics&)>& on_step) {
  ds.validate();
  if (ds.seq_len != m.cfg.seq_len() || ds.vocab != m.cfg.vocab || ds.classes != m.cfg.classes)
    throw std::invalid_argument("train_ar: dataset layout (seq " + std::to_string(ds.seq_len) + ", V " +
                                std::to_string(ds.vocab) + ", C " + std::to_string(ds.classes) +
                                ") does not match the model");
  if (ds.count() == 0 || tc.steps < 1 || tc.batch < 1) throw std::invalid_argument("train_ar: nothing to train");
  Adam opt(m.params.tensors(), tc.optim);
  Rng root(tc.seed);
  Rng pick = root.fork(1), drop = root.fork(2);
  const auto t = static_cast<std::size_t>(ds.seq_len);
  std::vector<ARMetrics> log;
  std::vector<int> cls(static_cast<std::size_t>(tc.batch));
  std::vector<std::int64_t> toks(static_cast<std::size_t>(tc.batch) * t);
  for (long step = 0; step < tc.steps; ++step) {
    for (std::size_t b = 0; b < cls.size(); ++b) {
      const auto i = static_cast<std::size_t>(pick.below(static_cast<std::uint64_t>(ds.count())));
      cls[b] = ds.labels[i];
      std::copy_n(ds.tokens.begin() + static_cast<std::ptrdiff_t>(i * t), t,
                  toks.begin() + static_cast<std::ptrdiff_t>(b * t));
    }
    auto r = ar_loss(m, cls, toks, drop, m.cfg.drop_prob);
    const double loss = r.loss.item();
    if (!std::isfinite(loss)) throw ad::NonFiniteError("train_ar: non-finite loss at step " + std::to_string(step));
    r.loss.backward();
    const double lr = lr_at(tc.optim, step, tc.steps);
    opt.step(lr);
    ARMetrics row{step, loss, r.accuracy, lr};
    log.push_back(row);
    if (on_step) on_step(row);
  }
  return log;
}

AREval evaluate_ar(const ARModel& m, const TokenDataset& ds, int chunk) {
  ds.validate();
  ad::NoGradGuard guard;
  const auto t = static_cast<std::int64_t>(ds.seq_len);
  double loss = 0, hits = 0;
  for (std::int64_t b = 0; b < ds.count(); b += chunk) {
    const auto n = std::min<std::int64_t>(chunk, ds.count() - b);
    std::span<const int> cls(ds.labels.data() + b, static_cast<std::size_t>(n));
    std::span<const std::int64_t> toks(ds.tokens.data() + b * t, static_cast<std::size_t>(n * t));
    Tensor flat = ad::reshape(ar_forward(m, cls, toks), {-1, m.cfg.vocab});
    loss += ad::cross_entropy(flat, toks).item() * static_cast<double>(n);
    hits += argmax_accuracy(flat, toks) * static_cast<double>(n);
  }
  const double count = static_cast<double>(ds.count());
  return {loss / count, hits / count};
}

const char* metrics_header() { return "step,loss,accuracy,lr"; }

std::string metrics_row(const ARMetrics& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.6g,%.9g", r.step, r.loss, r.accuracy, r.lr);
  return buf;
}

}  // namespace alitok::ar
