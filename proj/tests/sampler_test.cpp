// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "alitok/ar/sampler.hpp"
#include "test_util.hpp"

namespace ad = alitok::ad;
namespace ar = alitok::ar;
using ad::Tensor;
using alitok::Rng;

namespace {

ar::ARConfig small(int prefix = 4, int grid = 4) {
  ar::ARConfig c;
  c.vocab = 16;
  c.classes = 4;
  c.prefix = prefix;
  c.grid_h = c.grid_w = grid;
  c.block = {32, 4, 2.0, true, 1e-6};
  c.depth = 2;
  c.init_std = 0.2;
  return c;
}

double entropy(std::span<const double> logits, double t) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double v : logits) z += std::exp((v - mx) / t);
  double h = 0;
  for (double v : logits) {
    const double p = std::exp((v - mx) / t) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

TEST(CfgSchedule, Endpoints) {
  EXPECT_EQ(ar::cfg_schedule(0, 72, 8.0, 1.4), 1.0);
  EXPECT_NEAR(ar::cfg_schedule(71, 72, 8.0, 1.4), 8.0, 1e-9);
  EXPECT_NEAR(ar::cfg_schedule(5, 11, 3.0, 1.0), 2.0, 1e-9);
  EXPECT_EQ(ar::cfg_schedule(0, 1, 4.0, 2.0), 4.0);
  EXPECT_THROW(ar::cfg_schedule(3, 3, 2.0, 1.0), std::out_of_range);
  double prev = 0;
  for (int t = 0; t < 20; ++t) {
    const double g = ar::cfg_schedule(t, 20, 5.0, 1.4);
    EXPECT_GE(g, prev);
    prev = g;
  }
}

TEST(CfgCombine, Identities) {
  std::vector<double> cond{0.3, -1.7, 2.2}, uncond{1.1, 0.4, -0.9};
  EXPECT_EQ(ar::cfg_combine(cond, uncond, 1.0), cond);
  EXPECT_EQ(ar::cfg_combine(cond, uncond, 0.0), uncond);
  EXPECT_EQ(ar::cfg_combine(std::vector<double>{1, 2}, std::vector<double>{0, 0}, 2.0), (std::vector<double>{2, 4}));
  EXPECT_THROW(ar::cfg_combine(cond, std::vector<double>{1}, 2.0), ad::ShapeError);
}

TEST(Sampling, TemperatureFloorIsArgmax) {
  Rng rng(1);
  std::vector<double> l{0.1, 2.0, 1.9, 2.0};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(ar::sample_categorical(l, 1e-7, rng), 1);
}

TEST(Sampling, EntropyGrowsWithTemperature) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> l(16);
    for (auto& v : l) v = rng.uniform(-4, 4);
    double prev = -1;
    for (double t : {0.5, 0.95, 1.0, 2.0}) {
      const double h = entropy(l, t);
      EXPECT_GE(h, prev - 1e-12);
      prev = h;
    }
  }
}

TEST(Sampling, InverseCdfFollowsProbabilities) {
  Rng rng(3);
  std::vector<double> l{0.0, std::log(3.0)};  // p = 1/4, 3/4
  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) ones += ar::sample_categorical(l, 1.0, rng) == 1;
  EXPECT_NEAR(ones / static_cast<double>(n), 0.75, 4 * std::sqrt(0.75 * 0.25 / n));
}

TEST(Generation, CachedLogitsMatchFullForward) {
  auto c = small();
  auto m = ar::ARModel::create(c, 4);
  Rng pick(5);
  double worst = 0;
  for (int run = 0; run < 20; ++run) {
    const int cls = static_cast<int>(pick.below(4));
    ar::SamplingConfig sc;
    sc.temperature = 1.0;
    ar::GenerationSession s(m, {cls}, sc, 100 + static_cast<std::uint64_t>(run));
    std::vector<std::vector<double>> per_step;
    while (!s.done()) {
      s.step();
      per_step.push_back(s.cond_logits()[0]);
    }
    std::vector<int> cv{cls};
    auto full = ar::ar_forward(m, cv, s.tokens()).to_vector();
    for (std::size_t t = 0; t < per_step.size(); ++t)
      for (std::size_t j = 0; j < 16; ++j) worst = std::max(worst, std::abs(per_step[t][j] - full[t * 16 + j]));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Generation, CachedMatchesUncachedF64) {
  auto c = small();
  auto m = ar::ARModel::create(c, 6, ad::DType::F64);
  ar::SamplingConfig on, off;
  off.use_cache = false;
  ar::GenerationSession a(m, {1, 2}, on, 9), b(m, {1, 2}, off, 9);
  while (!a.done()) {
    a.step();
    b.step();
    for (int r = 0; r < 2; ++r)
      for (int j = 0; j < 16; ++j) ASSERT_NEAR(a.cond_logits()[r][j], b.cond_logits()[r][j], 1e-10);
  }
  EXPECT_EQ(a.tokens(), b.tokens());
}

TEST(Generation, LengthAndDeterminism) {
  auto c = small();
  auto m = ar::ARModel::create(c, 7);
  std::vector<int> cls{0, 3};
  ar::SamplingConfig sc;
  EXPECT_EQ(sc.temperature, 0.95);
  auto a = ar::generate(m, cls, sc, 11);
  auto b = ar::generate(m, cls, sc, 11);
  EXPECT_EQ(static_cast<int>(a.size()), 2 * c.seq_len());
  EXPECT_EQ(a, b);
  sc.use_cache = false;
  EXPECT_EQ(ar::generate(m, cls, sc, 11), a);
}

TEST(Generation, CacheLengthTracksStepsAndEarlierSlotsNeverChange) {
  auto c = small();
  auto m = ar::ARModel::create(c, 8);
  ar::SamplingConfig sc;
  sc.use_cfg = true;
  sc.guidance = 3.0;
  sc.temperature = 1.0;
  ar::GenerationSession s(m, {2}, sc, 12);
  const auto& cache = s.caches().front();
  const std::size_t slot = static_cast<std::size_t>(c.block.head_dim());
  std::vector<float> snapshot;
  for (int t = 1; t <= c.seq_len(); ++t) {
    s.step();
    EXPECT_EQ(cache.length(), t);
    auto k = cache.raw_keys().as<float>();
    // Row 0, head 0: every slot written so far must keep its bytes.
    for (std::size_t i = 0; i < snapshot.size(); ++i) ASSERT_EQ(k[i], snapshot[i]) << "step " << t;
    snapshot.assign(k.begin(), k.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t) * slot));
  }
  EXPECT_THROW(s.step(), std::logic_error);
}

TEST(Generation, GuidanceOneEqualsConditional) {
  auto c = small();
  auto m = ar::ARModel::create(c, 13);
  ar::SamplingConfig plain, guided;
  plain.temperature = guided.temperature = 1.0;
  guided.use_cfg = true;
  guided.guidance = 1.0;
  ar::GenerationSession a(m, {1}, plain, 14), b(m, {1}, guided, 14);
  while (!a.done()) {
    a.step();
    b.step();
    ASSERT_EQ(b.guided_logits()[0], b.cond_logits()[0]);
  }
  EXPECT_EQ(a.tokens(), b.tokens());
}

TEST(Generation, NullClassIsGuidanceInvariant) {
  auto c = small();
  auto m = ar::ARModel::create(c, 15);
  ar::SamplingConfig plain, guided;
  plain.temperature = guided.temperature = 1.0;
  guided.use_cfg = true;
  guided.guidance = 6.0;
  guided.scaler_power = 1.4;
  ar::GenerationSession a(m, {c.null_class()}, plain, 16), b(m, {c.null_class()}, guided, 16);
  while (!b.done()) {
    a.step();
    b.step();
    for (int j = 0; j < 16; ++j) {
      ASSERT_NEAR(b.guided_logits()[0][j], a.cond_logits()[0][j], 1e-5);
      ASSERT_NEAR(b.cond_logits()[0][j], b.uncond_logits()[0][j], 1e-5);
    }
  }
  EXPECT_EQ(a.tokens(), b.tokens());
}

TEST(Bench, CachedIsFasterAndIdentical) {
  ar::ARConfig c = small(8, 8);  // 72 tokens
  c.vocab = 64;
  auto m = ar::ARModel::create(c, 17);
  ar::SamplingConfig sc;
  auto r = ar::bench_cache(m, 8, sc, 18);
  EXPECT_EQ(r.seq_len, 72);
  EXPECT_TRUE(r.identical);
  EXPECT_GT(r.speedup, 2.0);
  auto shortr = ar::bench_cache(ar::ARModel::create(small(0, 4), 19), 2, sc, 20);  // 16 tokens
  EXPECT_GT(shortr.speedup, 1.0);
}

TEST(SamplingConfig, Validation) {
  ar::SamplingConfig sc;
  sc.temperature = 0;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.temperature = 1;
  sc.use_cfg = true;
  sc.guidance = 0.5;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
}
