// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "alitok/autodiff/grad_check.hpp"
#include "alitok/autodiff/ops.hpp"
#include "primitive_cases.hpp"
#include "test_util.hpp"

namespace ad = alitok::ad;
using ad::Tensor;
using alitok::Rng;
using alitok::testing::bit_equal;
using alitok::testing::random_tensor;

namespace {

Tensor f64(const ad::Shape& s, std::vector<double> v, bool grad = false) {
  return Tensor::from(s, std::move(v), ad::DType::F64, grad);
}

}  // namespace

TEST(Forward, SoftmaxOfEqualLogitsIsUniform) {
  auto y = ad::softmax(f64({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Forward, IdentityMatmul) {
  auto y = ad::matmul(f64({2, 2}, {1, 0, 0, 1}), f64({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Forward, SaturatedCrossEntropyIsZero) {
  const std::int64_t target = 2;
  auto loss = ad::cross_entropy(f64({1, 4}, {0, 0, 1e9, 0}), std::span(&target, 1));
  EXPECT_NEAR(loss.item(), 0.0, 1e-6);
}

TEST(Forward, ShapeMismatchNamesPrimitiveAndShapes) {
  try {
    ad::add(f64({2, 3}, std::vector<double>(6, 0)), f64({4}, std::vector<double>(4, 0)));
    FAIL() << "expected ShapeError";
  } catch (const ad::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW(ad::matmul(f64({2, 3}, std::vector<double>(6, 0)), f64({2, 3}, std::vector<double>(6, 0))),
               ad::ShapeError);
}

TEST(Forward, NonFiniteLeafIsRejected) {
  auto x = f64({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  auto y = ad::sum(ad::mul(x, f64({2}, {1, 1})));
  EXPECT_THROW(ad::forward_eval(y), ad::NonFiniteError);
  EXPECT_NO_THROW(ad::forward_eval(ad::sum(f64({2}, {1, 2}))));
}

TEST(Forward, BroadcastTrailingAxes) {
  auto x = f64({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ad::add(x, f64({3}, {10, 20, 30})).to_vector(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(ad::mul(x, f64({2, 1}, {2, 3})).to_vector(), (std::vector<double>{2, 4, 6, 12, 15, 18}));
  // Middle-axis expansion goes through the general path.
  auto y = ad::add(f64({2, 1, 2}, {1, 2, 3, 4}), f64({3, 1}, {0, 10, 20}));
  EXPECT_EQ(y.shape(), (ad::Shape{2, 3, 2}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1, 2, 11, 12, 21, 22, 3, 4, 13, 14, 23, 24}));
}

TEST(Backward, SumOfSquares) {
  auto x = f64({3}, {1, 2, 3}, true);
  ad::sum(ad::mul(x, x)).backward();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, DetachBlocksGradient) {
  auto x = f64({3}, {1, 2, 3}, true);
  auto y = f64({3}, {4, 5, 6}, true);
  ad::sum(ad::mul(ad::detach(x), y)).backward();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(y.grad_vector(), (std::vector<double>{1, 2, 3}));
}

TEST(Backward, MseSingleElement) {
  auto x = f64({1}, {3}, true);
  auto loss = ad::mse(x, f64({1}, {0}));
  EXPECT_DOUBLE_EQ(loss.item(), 9.0);
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad_vector()[0], 6.0);
}

TEST(Backward, FanOutAccumulates) {
  auto x = f64({2}, {1, 2}, true);
  ad::sum(ad::add(ad::scale(x, 3.0), ad::mul(x, x))).backward();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{5, 7}));
}

TEST(Backward, NonScalarRootRejected) {
  auto x = f64({2}, {1, 2}, true);
  EXPECT_THROW(ad::scale(x, 2.0).backward(), ad::ShapeError);
}

TEST(Backward, NoGradOnConstantLeaves) {
  auto x = f64({2}, {1, 2}, true);
  auto c = f64({2}, {3, 4});
  ad::sum(ad::mul(x, c)).backward();
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, CycleDetected) {
  auto x = f64({1}, {1}, true);
  auto y = ad::scale(x, 2.0);
  auto z = ad::scale(y, 2.0);
  // Only reachable by tampering with the node graph.
  y.node().parents.push_back(z.node_ptr());
  EXPECT_THROW(ad::backward_grad(z), ad::GraphError);
  y.node().parents.pop_back();
}

TEST(GradCheck, QuadraticIsExact) {
  auto x = f64({2}, {1, -2});
  double err = ad::grad_check([](const Tensor& t) { return ad::sum(ad::mul(t, t)); }, x, 1e-3);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, SoftmaxThenCrossEntropy) {
  Rng rng(11);
  auto x = random_tensor({1, 4}, rng, ad::DType::F64, -2, 2);
  const std::int64_t target = 1;
  double err = ad::grad_check(
      [&](const Tensor& t) {
        // Explicit softmax + log path, independent of the fused loss.
        auto p = ad::softmax(t);
        return ad::scale(ad::sum(ad::mul(ad::log(p), f64({1, 4}, {0, 1, 0, 0}))), -1.0);
      },
      x, 1e-3);
  EXPECT_LT(err, 1e-4);
  err = ad::grad_check([&](const Tensor& t) { return ad::cross_entropy(t, std::span(&target, 1)); }, x, 1e-3);
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, NonFiniteProbeRejected) {
  auto x = f64({1}, {0.0});
  EXPECT_THROW(ad::grad_check([](const Tensor& t) { return ad::sum(ad::log(t)); }, x, 1e-3), ad::NonFiniteError);
}

// Gradient fidelity property: every primitive, 10 random F64 points.
using alitok::testing::PrimitiveCase;

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, CentralDifferenceAgrees) {
  const auto& c = GetParam();
  for (int trial = 0; trial < 10; ++trial)
    EXPECT_LT(alitok::testing::primitive_error(c, trial), 1e-4) << c.name << " trial " << trial;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::ValuesIn(alitok::testing::primitive_cases()),
                         [](const ::testing::TestParamInfo<PrimitiveCase>& info) { return std::string(info.param.name); });

TEST(Properties, SoftmaxRowsSumToOneAndShiftInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 7}, rng, ad::DType::F64, -10, 10);
    auto p = ad::softmax(x).to_vector();
    auto q = ad::softmax(ad::add_scalar(x, rng.uniform(-50, 50))).to_vector();
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += p[r * 7 + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_LT(alitok::testing::max_abs_diff(p, q), 1e-6);
  }
}

TEST(Properties, ForwardBackwardDeterministic) {
  auto run = [] {
    Rng rng(9);
    auto w = random_tensor({6, 5}, rng, ad::DType::F32, -1, 1, true);
    auto x = random_tensor({4, 6}, rng, ad::DType::F32);
    auto y = ad::softmax(ad::matmul(x, w));
    auto loss = ad::mean(ad::mul(y, y));
    loss.backward();
    return std::make_pair(y.data(), w.grad());
  };
  auto a = run();
  auto b = run();
  EXPECT_TRUE(bit_equal(a.first, b.first));
  EXPECT_TRUE(bit_equal(a.second, b.second));
}

TEST(Properties, DetachZeroesUpstreamGradients) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({3, 3}, rng, ad::DType::F64, -1, 1, true);
    auto b = random_tensor({3, 3}, rng, ad::DType::F64, -1, 1, true);
    auto upstream = ad::matmul(a, a);
    auto loss = ad::sum(ad::mul(ad::exp(ad::detach(upstream)), b));
    loss.backward();
    for (double g : a.grad_vector()) EXPECT_EQ(g, 0.0);
    EXPECT_TRUE(b.has_grad());
  }
}
