// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alitok/autodiff/tensor.hpp"

namespace alitok::data {

/// A labelled set of channel-last RGB images in [0, 1], stored contiguously.
struct ImageSet {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> pixels;  // [count, height, width, 3]
  std::vector<int> labels;

  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_size() const { return height * width * 3; }
  std::span<const float> image(std::int64_t i) const;
  void push(std::span<const float> img, int label);

  /// Stacks the selected images into a [n, height, width, 3] tensor.
  ad::Tensor batch(std::span<const std::int64_t> ids, ad::DType dt) const;
  /// Images [begin, begin + n).
  ad::Tensor range(std::int64_t begin, std::int64_t n, ad::DType dt) const;
};

/// Deterministic class-conditioned stripe images.
struct SyntheticSpec {
  int classes = 8;
  int images_per_class = 64;
  int image_h = 32;
  int image_w = 32;
  double noise_amplitude = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Oriented sinusoid with angle c*pi/C and a class-dependent frequency, plus
/// uniform noise in [-a, a]; clamped to [0, 1]. A pure function of (spec, c, i).
std::vector<float> gen_image(const SyntheticSpec& spec, int class_id, int index);

/// All images, ordered by class then index.
ImageSet gen_dataset(const SyntheticSpec& spec);

}  // namespace alitok::data
