// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "alitok/ar/model.hpp"
#include "alitok/autodiff/grad_check.hpp"
#include "test_util.hpp"

namespace ad = alitok::ad;
namespace ar = alitok::ar;
using ad::Tensor;
using alitok::Rng;
using alitok::testing::bit_equal;

namespace {

ar::ARConfig tiny(int vocab = 8, int prefix = 2, int gh = 2, int gw = 2) {
  ar::ARConfig c;
  c.vocab = vocab;
  c.classes = 3;
  c.prefix = prefix;
  c.grid_h = gh;
  c.grid_w = gw;
  c.block = {16, 2, 2.0, true, 1e-6};
  c.depth = 2;
  c.init_std = 0.3;
  return c;
}

std::vector<std::int64_t> random_tokens(std::size_t n, int vocab, Rng& rng) {
  std::vector<std::int64_t> t(n);
  for (auto& x : t) x = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

// log softmax(row)[target], in double.
double log_prob(std::span<const double> row, std::int64_t target) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0;
  for (double v : row) s += std::exp(v - mx);
  return row[static_cast<std::size_t>(target)] - mx - std::log(s);
}

}  // namespace

TEST(ARConfig, PositionMap) {
  ar::ARConfig c;
  c.prefix = 16;
  c.grid_h = c.grid_w = 16;
  c.block = {64, 4, 4.0, true, 1e-6};
  auto r = c.rope();
  ASSERT_EQ(static_cast<int>(r.positions.size()), 272);
  EXPECT_EQ(r.positions[0].mode, alitok::nn::RopeMode::None);
  for (int k = 0; k < 16; ++k) {
    EXPECT_EQ(r.positions[1 + k].mode, alitok::nn::RopeMode::OneD);
    EXPECT_EQ(r.positions[1 + k].row, k);
  }
  // First grid token (slot 17) sits at (16, 16); the last stored one at (31, 30).
  EXPECT_EQ(r.positions[17].mode, alitok::nn::RopeMode::TwoD);
  EXPECT_EQ(r.positions[17].row, 16);
  EXPECT_EQ(r.positions[17].col, 16);
  EXPECT_EQ(r.positions[271].row, 31);
  EXPECT_EQ(r.positions[271].col, 30);
}

TEST(ARForward, RowsIgnoreCurrentAndLaterTokens) {
  auto c = tiny();
  auto m = ar::ARModel::create(c, 1);
  Rng rng(2);
  const auto t = static_cast<std::size_t>(c.seq_len());
  for (int trial = 0; trial < 100; ++trial) {
    auto toks = random_tokens(t, c.vocab, rng);
    const auto i = static_cast<std::size_t>(rng.below(t));
    auto other = toks;
    for (std::size_t j = i; j < t; ++j) other[j] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.vocab)));
    std::vector<int> cls{1};
    auto a = ar::ar_forward(m, cls, toks).values<float>();
    auto b = ar::ar_forward(m, cls, other).values<float>();
    for (std::size_t k = 0; k <= i * static_cast<std::size_t>(c.vocab) + c.vocab - 1; ++k) ASSERT_EQ(a[k], b[k]);
  }
}

TEST(ARForward, JointIsNormalisedByBruteForce) {
  // V = 4, three tokens: one prefix token and a 1x2 grid.
  auto c = tiny(4, 1, 1, 2);
  c.block = {8, 1, 2.0, true, 1e-6};
  auto m = ar::ARModel::create(c, 3, ad::DType::F64);
  const int v = 4;
  double total = 0;
  for (int a = 0; a < v; ++a)
    for (int b = 0; b < v; ++b)
      for (int d = 0; d < v; ++d) {
        std::vector<std::int64_t> seq{a, b, d};
        std::vector<int> cls{2};
        // Chain rule from one teacher-forced pass.
        auto logits = ar::ar_forward(m, cls, seq).to_vector();
        double chain = 0;
        for (int i = 0; i < 3; ++i) chain += log_prob(std::span(logits).subspan(static_cast<std::size_t>(i * v), v), seq[static_cast<std::size_t>(i)]);
        // Direct evaluation: each conditional from a pass over its own prefix only.
        double direct = 0;
        for (int i = 0; i < 3; ++i) {
          Tensor x = ar::embed_inputs(m, cls, seq, 3, i);
          auto l = ar::run_stack(m, x).to_vector();
          direct += log_prob(std::span(l).subspan(static_cast<std::size_t>(i * v), v), seq[static_cast<std::size_t>(i)]);
        }
        ASSERT_NEAR(chain, direct, 1e-12);
        total += std::exp(chain);
      }
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(ARLoss, GradientCheck) {
  auto c = tiny(5, 1, 1, 2);
  c.block = {8, 2, 2.0, true, 1e-6};
  c.depth = 1;
  auto m = ar::ARModel::create(c, 4, ad::DType::F64);
  std::vector<int> cls{0, 3};
  std::vector<std::int64_t> toks{1, 4, 2, 0, 3, 3};
  Rng rng(0);
  auto loss = [&] { return ar::ar_loss(m, cls, toks, rng, 0.0).loss; };
  EXPECT_LT(ad::grad_check_params(loss, m.params.tensors(), 1e-3), 1e-4);
}

TEST(ARLoss, PerfectLogitsGiveFullAccuracyAndZeroLoss) {
  std::vector<std::int64_t> targets{2, 0, 1};
  std::vector<double> l(9, 0.0);
  for (int i = 0; i < 3; ++i) l[static_cast<std::size_t>(i * 3 + targets[static_cast<std::size_t>(i)])] = 1e9;
  Tensor logits = Tensor::from({3, 3}, l, ad::DType::F64);
  EXPECT_EQ(ar::argmax_accuracy(logits, targets), 1.0);
  EXPECT_NEAR(ad::cross_entropy(logits, targets).item(), 0.0, 1e-6);
}

TEST(ARLoss, UntrainedModelScoresChanceAccuracy) {
  auto c = tiny(64, 8, 8, 8);
  c.block = {32, 4, 2.0, true, 1e-6};
  auto m = ar::ARModel::create(c, 5);
  Rng rng(6);
  const int rows = 139;  // 139 * 72 = 10008 positions
  std::vector<int> cls(rows);
  for (auto& k : cls) k = static_cast<int>(rng.below(3));
  auto toks = random_tokens(static_cast<std::size_t>(rows * c.seq_len()), c.vocab, rng);
  ad::NoGradGuard guard;
  const double acc = ar::argmax_accuracy(ad::reshape(ar::ar_forward(m, cls, toks), {-1, 64}), toks);
  const double n = rows * c.seq_len(), p = 1.0 / 64;
  EXPECT_NEAR(acc, p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(ARLoss, AccuracyMatchesRecount) {
  auto c = tiny();
  auto m = ar::ARModel::create(c, 7);
  Rng rng(8);
  std::vector<int> cls{0, 1, 2};
  auto toks = random_tokens(static_cast<std::size_t>(3 * c.seq_len()), c.vocab, rng);
  auto r = ar::ar_loss(m, cls, toks, rng, 0.0);
  auto logits = ar::ar_forward(m, cls, toks).values<float>();
  int hits = 0;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < static_cast<std::size_t>(c.vocab); ++j)
      if (logits[i * c.vocab + j] > logits[i * c.vocab + best]) best = j;
    hits += static_cast<std::int64_t>(best) == toks[i];
  }
  EXPECT_EQ(r.accuracy, static_cast<double>(hits) / static_cast<double>(toks.size()));
}

TEST(ARLoss, DropProbabilityExtremes) {
  auto c = tiny();
  auto m = ar::ARModel::create(c, 9);
  Rng rng(10);
  std::vector<int> cls{0, 1, 2, 0, 1, 2, 0, 1};
  auto toks = random_tokens(cls.size() * static_cast<std::size_t>(c.seq_len()), c.vocab, rng);
  EXPECT_EQ(ar::ar_loss(m, cls, toks, rng, 0.0).used_classes, cls);
  auto r = ar::ar_loss(m, cls, toks, rng, 1.0);
  for (int k : r.used_classes) EXPECT_EQ(k, c.null_class());
  r.loss.backward();
  auto g = m.params.get("ar.class_embed").grad_vector();
  const auto w = static_cast<std::size_t>(c.block.width);
  double null_mass = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i / w < static_cast<std::size_t>(c.classes)) ASSERT_EQ(g[i], 0.0);
    else null_mass += std::abs(g[i]);
  }
  EXPECT_GT(null_mass, 0.0);
}

TEST(TrainAR, LearnsAndIsDeterministic) {
  auto c = tiny(8, 2, 2, 2);
  ar::TokenDataset ds;
  ds.seq_len = c.seq_len();
  ds.vocab = c.vocab;
  ds.classes = c.classes;
  // Each class repeats a fixed sequence, with one random token per row.
  Rng rng(11);
  for (int i = 0; i < 48; ++i) {
    const int k = i % 3;
    for (int j = 0; j < c.seq_len(); ++j) ds.tokens.push_back((k * 3 + j) % c.vocab);
    ds.tokens.back() = static_cast<std::int64_t>(rng.below(8));
    ds.labels.push_back(k);
  }
  ar::ARTrainConfig tc;
  tc.steps = 150;
  tc.batch = 8;
  tc.seed = 4;
  tc.optim.base_lr = 3e-3;
  tc.optim.min_lr = 3e-4;
  auto m1 = ar::ARModel::create(c, 12);
  auto log = ar::train_ar(m1, ds, tc);
  double first = 0, last = 0;
  for (int i = 0; i < 15; ++i) {
    first += log[static_cast<std::size_t>(i)].loss;
    last += log[log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, first);
  EXPECT_GE(ar::evaluate_ar(m1, ds).accuracy, 5.0 / c.vocab);
  auto m2 = ar::ARModel::create(c, 12);
  ar::train_ar(m2, ds, tc);
  for (std::size_t i = 0; i < m1.params.size(); ++i)
    EXPECT_TRUE(bit_equal(m1.params.entries()[i].second.data(), m2.params.entries()[i].second.data()));
}

TEST(TokenDataset, Validation) {
  ar::TokenDataset ds{3, 4, 2, {0, 1, 2}, {0}};
  EXPECT_NO_THROW(ds.validate());
  ds.tokens[1] = 4;
  EXPECT_THROW(ds.validate(), std::out_of_range);
  ds.tokens.pop_back();
  EXPECT_THROW(ds.validate(), std::invalid_argument);
}
