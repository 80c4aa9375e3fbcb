// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "alitok/autodiff/grad_check.hpp"
#include "alitok/tokenizer/tokenizer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace ad = alitok::ad;
namespace tok = alitok::tok;
namespace data = alitok::data;
using ad::Tensor;
using alitok::Rng;
using alitok::testing::bit_equal;
using alitok::testing::random_tensor;

namespace {

tok::TokConfig small_config() {
  tok::TokConfig c;
  c.image_h = c.image_w = 16;
  c.encoder = {16, 2, 2.0, true, 1e-6};
  c.decoder = {16, 2, 2.0, true, 1e-6};
  c.encoder_depth = c.decoder_depth = c.stage2_depth = 1;
  c.vocab = 16;
  c.code_dim = 4;
  c.buffer_count = 4;
  return c;
}

// 4x4 images, 2x2 patches: a 2x2 grid with two prefix tokens.
tok::TokConfig micro_config() {
  tok::TokConfig c = small_config();
  c.image_h = c.image_w = 4;
  c.patch = 2;
  c.encoder = {4, 1, 2.0, true, 1e-6};
  c.decoder = {4, 1, 2.0, true, 1e-6};
  c.vocab = 4;
  c.code_dim = 2;
  c.buffer_count = 2;
  c.init_std = 0.5;
  return c;
}

data::ImageSet small_dataset(int size, int per_class) {
  data::SyntheticSpec s;
  s.classes = 4;
  s.images_per_class = per_class;
  s.image_h = s.image_w = size;
  return data::gen_dataset(s);
}

}  // namespace

TEST(Patchify, TopLeftBlockIsFirstPatch) {
  std::vector<double> v(8 * 8 * 3);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  Tensor img = Tensor::from({1, 8, 8, 3}, v, ad::DType::F64);
  Tensor p = tok::patchify(img, 4);
  ASSERT_EQ(p.shape(), (ad::Shape{1, 4, 48}));
  auto pv = p.to_vector();
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(pv[(y * 4 + x) * 3 + c], v[(y * 8 + x) * 3 + c]);
}

TEST(Patchify, RoundTripIsBitExact) {
  Rng rng(1);
  Tensor img = random_tensor({2, 8, 12, 3}, rng, ad::DType::F32, 0, 1);
  Tensor back = tok::unpatchify(tok::patchify(img, 4), 2, 3, 4);
  EXPECT_TRUE(bit_equal(img.data(), back.data()));
}

TEST(Patchify, ConstantImageGivesIdenticalPatches) {
  Tensor img = Tensor::full({1, 8, 8, 3}, 0.25);
  auto v = tok::patchify(img, 4).to_vector();
  for (double x : v) EXPECT_EQ(x, 0.25);
}

TEST(Patchify, IndivisibleDimsRejected) {
  EXPECT_THROW(tok::patchify(Tensor::zeros({1, 6, 8, 3}), 4), ad::ShapeError);
}

TEST(Encode, LengthDeterminismAndRange) {
  tok::TokConfig c;  // desk default
  auto m = tok::TokenizerModel::create(c, 3);
  auto ds = small_dataset(32, 1);
  Tensor x = ds.range(0, 1, ad::DType::F32);
  auto a = tok::encode(x, m);
  auto b = tok::encode(x, m);
  EXPECT_EQ(c.seq_len(), 8 + 64);
  ASSERT_EQ(static_cast<int>(a.indices.size()), 72);
  EXPECT_EQ(a.indices, b.indices);
  for (auto i : a.indices) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, c.vocab);
  }
}

TEST(DecodeStage1, GridPatchesIgnoreLaterTokens) {
  auto c = small_config();
  auto m = tok::TokenizerModel::create(c, 4);
  Rng rng(5);
  const int k = c.prefix(), g = c.grid();
  for (int trial = 0; trial < 5; ++trial) {
    Tensor q = random_tensor({1, c.seq_len(), c.code_dim}, rng, ad::DType::F32);
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(g)));
    auto qv = q.to_vector();
    for (int s = k + j; s < c.seq_len(); ++s)
      for (int d = 0; d < c.code_dim; ++d) qv[s * c.code_dim + d] += rng.uniform(-1, 1);
    Tensor q2 = Tensor::from(q.shape(), qv, ad::DType::F32);
    auto a = tok::decode_stage1(q, m), b = tok::decode_stage1(q2, m);
    EXPECT_TRUE(bit_equal(a.prefix_patches.data(), b.prefix_patches.data()));
    const auto pd = c.patch_dim();
    auto ga = a.grid_patches.values<float>(), gb = b.grid_patches.values<float>();
    for (int i = 0; i < j * pd; ++i) ASSERT_EQ(ga[i], gb[i]) << "patch " << i / pd << " perturbed at " << j;
  }
}

TEST(DecodeStage1, SingleTokenGrid) {
  auto c = small_config();
  c.image_h = c.image_w = 4;  // H = W = 1, K = 1
  auto m = tok::TokenizerModel::create(c, 6);
  ASSERT_EQ(c.seq_len(), 2);
  Tensor q = Tensor::from({1, 2, 4}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}, ad::DType::F32);
  Tensor q2 = Tensor::from({1, 2, 4}, {0.1, 0.2, 0.3, 0.4, -5.0, 6.0, 0.0, 1.0}, ad::DType::F32);
  auto a = tok::decode_stage1(q, m), b = tok::decode_stage1(q2, m);
  EXPECT_TRUE(bit_equal(a.prefix_patches.data(), b.prefix_patches.data()));
  EXPECT_FALSE(bit_equal(a.grid_patches.data(), b.grid_patches.data()));
  EXPECT_EQ(a.image.shape(), (ad::Shape{1, 4, 4, 3}));
}

TEST(DecodeStage1, OutputImageMatchesInputShape) {
  auto c = small_config();
  auto m = tok::TokenizerModel::create(c, 7);
  auto ds = small_dataset(16, 1);
  Tensor x = ds.range(0, 2, ad::DType::F32);
  auto rec = tok::decode_stage1(tok::encode(x, m).quant.quantized, m);
  EXPECT_EQ(rec.image.shape(), x.shape());
  EXPECT_TRUE(rec.image.data().all_finite());
}

TEST(LossStage1, TotalIsSumOfParts) {
  EXPECT_EQ(tok::recon_total(1, 1, 1, 0, 0.1), 3.0);
  EXPECT_NEAR(tok::recon_total(1, 1, 1, 1, 0.1), 3.1, 1e-12);
  auto c = small_config();
  auto m = tok::TokenizerModel::create(c, 8);
  auto ds = small_dataset(16, 1);
  auto parts = tok::loss_stage1(ds.range(0, 2, ad::DType::F32), m);
  const float f = (static_cast<float>(parts.mse) + static_cast<float>(parts.perc)) + static_cast<float>(parts.quant);
  const float aux = static_cast<float>(parts.aux_mse) + static_cast<float>(parts.aux_perc);
  EXPECT_EQ(parts.total.item(), static_cast<double>(f + aux));
  for (double v : {parts.mse, parts.perc, parts.quant, parts.aux_mse, parts.aux_perc}) EXPECT_GE(v, 0.0);
  EXPECT_GT(parts.aux_mse, 0.0);
}

TEST(LossStage1, AuxTermsPassNoGradientToGridTokens) {
  auto c = small_config();
  auto m = tok::TokenizerModel::create(c, 9);
  Rng rng(10);
  Tensor q = random_tensor({2, c.seq_len(), c.code_dim}, rng, ad::DType::F32, -1, 1, true);
  auto ds = small_dataset(16, 1);
  auto rec = tok::decode_stage1(q, m);
  auto aux = tok::aux_losses(ds.range(0, 2, ad::DType::F32), rec, c);
  ad::add(aux.mse, aux.perc).backward();
  auto g = q.grad_vector();
  double prefix_mass = 0;
  for (int b = 0; b < 2; ++b)
    for (int s = 0; s < c.seq_len(); ++s)
      for (int d = 0; d < c.code_dim; ++d) {
        const double v = g[(b * c.seq_len() + s) * c.code_dim + d];
        if (s >= c.prefix()) ASSERT_EQ(v, 0.0) << "slot " << s;
        prefix_mass += std::abs(v);
      }
  EXPECT_GT(prefix_mass, 0.0);
}

TEST(LossStage1, GradientCheckOverAllParameters) {
  // Straight-through and stop-gradient paths are surrogates, so finite
  // differences are taken of the frozen-stop-gradient oracle. Its analytic
  // gradient must equal that of loss_stage1 for every parameter.
  auto c = micro_config();
  c.init_std = 0.3;
  auto m = tok::TokenizerModel::create(c, 11, ad::DType::F64);
  Rng rng(12);
  Tensor x = random_tensor({2, 4, 4, 3}, rng, ad::DType::F64, 0, 1);
  alitok::testing::Stage1Oracle oracle(m, x);
  auto params = m.params.tensors();
  tok::loss_stage1(x, m).total.backward();
  std::vector<std::vector<double>> real;
  for (auto& p : params) real.push_back(p.grad_vector());
  m.params.zero_grad();
  EXPECT_NEAR(oracle().item(), tok::loss_stage1(x, m).total.item(), 1e-14);
  oracle().backward();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad_vector();
    for (std::size_t j = 0; j < g.size(); ++j) ASSERT_NEAR(g[j], real[i][j], 1e-12) << m.params.entries()[i].first;
  }
  m.params.zero_grad();
  EXPECT_LT(ad::grad_check_params(oracle, params, 1e-3), 1e-4);
}

TEST(FeatureLoss, IdentitySymmetryDeterminism) {
  Rng rng(13);
  Tensor a = random_tensor({2, 8, 8, 3}, rng, ad::DType::F32, 0, 1);
  Tensor b = random_tensor({2, 8, 8, 3}, rng, ad::DType::F32, 0, 1);
  EXPECT_EQ(tok::fixed_feature_loss(a, a, 1).item(), 0.0);
  EXPECT_EQ(tok::fixed_feature_loss(a, b, 1).item(), tok::fixed_feature_loss(b, a, 1).item());
  EXPECT_EQ(tok::fixed_feature_loss(a, b, 1).item(), tok::fixed_feature_loss(a, b, 1).item());
  EXPECT_NE(tok::fixed_feature_loss(a, b, 1).item(), tok::fixed_feature_loss(a, b, 2).item());
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  auto c = small_config();
  auto ds = small_dataset(16, 8);
  tok::TrainConfig tc;
  tc.steps = 60;
  tc.batch = 4;
  tc.seed = 3;
  tc.optim.base_lr = 3e-3;
  tc.optim.min_lr = 3e-4;
  auto m1 = tok::TokenizerModel::create(c, 1);
  auto log = tok::train_tokenizer(m1, ds, tc);
  double first = 0, last = 0;
  for (int i = 0; i < 6; ++i) {
    first += log[static_cast<std::size_t>(i)].total;
    last += log[log.size() - 1 - static_cast<std::size_t>(i)].total;
  }
  EXPECT_LT(last, first);
  auto m2 = tok::TokenizerModel::create(c, 1);
  tok::train_tokenizer(m2, ds, tc);
  for (std::size_t i = 0; i < m1.params.size(); ++i)
    EXPECT_TRUE(bit_equal(m1.params.entries()[i].second.data(), m2.params.entries()[i].second.data()))
        << m1.params.entries()[i].first;
}

TEST(Training, StageTwoFreezesEncoderAndCodebook) {
  auto c = small_config();
  auto ds = small_dataset(16, 4);
  auto m = tok::TokenizerModel::create(c, 2);
  tok::TrainConfig tc;
  tc.steps = 5;
  tc.batch = 4;
  tok::train_tokenizer(m, ds, tc);
  const auto before = tok::encode_all(m, ds);
  std::vector<std::pair<std::string, ad::Buffer>> frozen;
  for (const auto& [name, t] : m.params.entries())
    if (name.rfind("dec2.", 0) != 0) frozen.emplace_back(name, t.data());
  const auto buffer_before = m.params.get("dec2.buffer").to_vector();

  tc.stage = 2;
  tc.steps = 10;
  tok::train_tokenizer(m, ds, tc);
  EXPECT_EQ(tok::encode_all(m, ds), before);
  for (const auto& [name, buf] : frozen) EXPECT_TRUE(bit_equal(buf, m.params.get(name).data())) << name;
  EXPECT_NE(m.params.get("dec2.buffer").to_vector(), buffer_before);
}

TEST(DecodeStage2, BufferGetsGradientEncoderNone) {
  auto c = small_config();
  auto m = tok::TokenizerModel::create(c, 14);
  m.params.set_trainable("enc.", false);
  m.params.set_trainable("codebook", false);
  auto ds = small_dataset(16, 1);
  Tensor x = ds.range(0, 2, ad::DType::F32);
  auto parts = tok::loss_stage2(x, m);
  parts.total.backward();
  EXPECT_TRUE(m.params.get("dec2.buffer").has_grad());
  for (const auto& t : m.params.with_prefix("enc.")) EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(tok::decode_stage2(tok::encode(x, m).quant.quantized, m).image.shape(), x.shape());
}

TEST(Config, Validation) {
  auto c = small_config();
  c.image_h = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.use_prefix = false;
  EXPECT_THROW(c.validate(), std::invalid_argument);  // aux loss without prefix
  c.aux_loss = false;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.seq_len(), c.grid());
}
