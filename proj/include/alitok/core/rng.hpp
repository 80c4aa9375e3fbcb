// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace alitok {

/// Counter-based generator: the n-th draw is splitmix64(seed + n * golden).
/// Output is identical on every platform; distributions below avoid <random>
/// distribution objects, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal (Box-Muller, cosine branch).
  double normal();
  /// Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double std);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent stream derived from this seed and a tag.
  Rng fork(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace alitok
