// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <vector>

#include "alitok/autodiff/tensor.hpp"
#include "alitok/core/rng.hpp"

namespace alitok::testing {

inline ad::Tensor random_tensor(const ad::Shape& shape, Rng& rng, ad::DType dt = ad::DType::F64,
                                double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor::from(shape, std::move(v), dt, requires_grad);
}

/// Bitwise equality of two buffers of the same dtype.
inline bool bit_equal(const ad::Buffer& a, const ad::Buffer& b) {
  if (a.dtype() != b.dtype() || a.size() != b.size()) return false;
  return ad::dispatch(a.dtype(), [&]<class T>() {
    return std::memcmp(a.as<T>().data(), b.as<T>().data(), a.size() * sizeof(T)) == 0;
  });
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace alitok::testing
