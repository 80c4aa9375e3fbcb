// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "alitok/autodiff/grad_check.hpp"
#include "alitok/autodiff/ops.hpp"
#include "test_util.hpp"

namespace alitok::testing {

/// One differentiable primitive applied to a random F64 point of `shape`.
struct PrimitiveCase {
  const char* name;
  ad::Shape shape;
  double lo, hi;
  std::function<ad::Tensor(const ad::Tensor&, Rng&)> build;
};

inline void PrintTo(const PrimitiveCase& c, std::ostream* os) { *os << c.name; }

namespace detail {

inline ad::Tensor rnd(const ad::Shape& s, Rng& r) { return random_tensor(s, r, ad::DType::F64); }

inline const std::int64_t kIds[] = {2, 0, 2, 1};
inline const std::int64_t kTargets[] = {1, 3, 0};

}  // namespace detail

/// Every primitive with a gradient; stop-gradient is excluded by construction.
inline std::vector<PrimitiveCase> primitive_cases() {
  using ad::Tensor;
  using detail::kIds;
  using detail::kTargets;
  using detail::rnd;
  return {{"add", {2, 3}, -1, 1, [](const Tensor& x, Rng& r) { return ad::add(x, rnd({3}, r)); }},
          {"add_rhs", {3}, -1, 1, [](const Tensor& x, Rng& r) { return ad::add(rnd({2, 3}, r), x); }},
          {"sub", {2, 3}, -1, 1, [](const Tensor& x, Rng& r) { return ad::sub(rnd({2, 1}, r), x); }},
          {"mul", {2, 3}, -1, 1, [](const Tensor& x, Rng&) { return ad::mul(x, x); }},
          {"mul_bcast", {2, 1}, -1, 1, [](const Tensor& x, Rng& r) { return ad::mul(rnd({2, 3}, r), x); }},
          {"div", {2, 3}, 0.5, 2, [](const Tensor& x, Rng& r) { return ad::div(rnd({2, 3}, r), x); }},
          {"scale", {4}, -1, 1, [](const Tensor& x, Rng&) { return ad::scale(x, -2.5); }},
          {"matmul", {2, 3, 4}, -1, 1, [](const Tensor& x, Rng& r) { return ad::matmul(x, rnd({4, 2}, r)); }},
          {"matmul_rhs", {2, 4, 2}, -1, 1,
                        [](const Tensor& x, Rng& r) { return ad::matmul(rnd({2, 3, 4}, r), x); }},
          {"matmul_nt", {2, 3, 4}, -1, 1,
                        [](const Tensor& x, Rng& r) { return ad::matmul_nt(x, rnd({2, 5, 4}, r)); }},
          {"matmul_nt_rhs", {2, 5, 4}, -1, 1,
                        [](const Tensor& x, Rng& r) { return ad::matmul_nt(rnd({2, 3, 4}, r), x); }},
          {"transpose", {2, 3, 4}, -1, 1, [](const Tensor& x, Rng&) { return ad::transpose(x); }},
          {"permute", {2, 3, 4}, -1, 1, [](const Tensor& x, Rng&) { return ad::permute(x, {2, 0, 1}); }},
          {"reshape", {2, 6}, -1, 1, [](const Tensor& x, Rng&) { return ad::reshape(x, {3, -1}); }},
          {"concat", {2, 3}, -1, 1,
                        [](const Tensor& x, Rng& r) { return ad::concat({x, rnd({2, 2}, r), x}, 1); }},
          {"slice", {3, 4}, -1, 1, [](const Tensor& x, Rng&) { return ad::slice(x, 1, 1, 2); }},
          {"gather_rows", {3, 2}, -1, 1, [](const Tensor& x, Rng&) { return ad::gather_rows(x, kIds); }},
          {"softmax", {3, 5}, -2, 2, [](const Tensor& x, Rng&) { return ad::softmax(x); }},
          {"softmax_causal", {2, 3, 4}, -2, 2,
                        [](const Tensor& x, Rng&) { return ad::softmax(x, ad::SoftmaxMask::Causal); }},
          {"log", {4}, 0.5, 2, [](const Tensor& x, Rng&) { return ad::log(x); }},
          {"exp", {4}, -1, 1, [](const Tensor& x, Rng&) { return ad::exp(x); }},
          {"cos", {4}, -3, 3, [](const Tensor& x, Rng&) { return ad::cos(x); }},
          {"sin", {4}, -3, 3, [](const Tensor& x, Rng&) { return ad::sin(x); }},
          {"sqrt", {4}, 0.5, 2, [](const Tensor& x, Rng&) { return ad::sqrt(x); }},
          {"silu", {4}, -3, 3, [](const Tensor& x, Rng&) { return ad::silu(x); }},
          {"sum", {2, 3}, -1, 1, [](const Tensor& x, Rng&) { return ad::sum(x); }},
          {"mean", {2, 3}, -1, 1, [](const Tensor& x, Rng&) { return ad::mean(x); }},
          {"mean_last", {2, 3}, -1, 1, [](const Tensor& x, Rng&) { return ad::mean_last(x); }},
          {"rms_normalize", {3, 4}, -1, 1, [](const Tensor& x, Rng&) { return ad::rms_normalize(x, 1e-6); }},
          {"rotary", {3, 2, 4}, -1, 1,
                        [](const Tensor& x, Rng& r) { return ad::rotary(x, random_tensor({3, 2}, r, ad::DType::F64, -3, 3)); }},
          {"cross_entropy", {3, 4}, -2, 2, [](const Tensor& x, Rng&) { return ad::cross_entropy(x, kTargets); }},
          {"mse", {2, 3}, -1, 1, [](const Tensor& x, Rng& r) { return ad::mse(x, rnd({2, 3}, r)); }}};
}

/// Largest relative error over `trials` random points, projecting outputs to a
/// scalar with fixed random weights so every coordinate matters.
inline double primitive_error(const PrimitiveCase& c, int trial) {
  Rng rng(1000 + static_cast<std::uint64_t>(trial));
  auto x = random_tensor(c.shape, rng, ad::DType::F64, c.lo, c.hi);
  Rng aux = rng.fork(7);
  auto f = [&](const ad::Tensor& t) {
    Rng r = aux;
    ad::Tensor y = c.build(t, r);
    auto w = random_tensor(y.shape(), r, ad::DType::F64);
    return ad::sum(ad::mul(y, w));
  };
  return ad::grad_check(f, x, 1e-3);
}

}  // namespace alitok::testing
