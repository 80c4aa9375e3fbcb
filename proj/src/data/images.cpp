// SPDX-License-Identifier: Apache-2.0
#include "alitok/data/images.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "alitok/core/rng.hpp"

namespace alitok::data {

std::span<const float> ImageSet::image(std::int64_t i) const {
  if (i < 0 || i >= count()) throw std::out_of_range("image index " + std::to_string(i));
  return {pixels.data() + i * image_size(), static_cast<std::size_t>(image_size())};
}

void ImageSet::push(std::span<const float> img, int label) {
  if (static_cast<std::int64_t>(img.size()) != image_size()) throw std::invalid_argument("image set: size mismatch");
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

ad::Tensor ImageSet::batch(std::span<const std::int64_t> ids, ad::DType dt) const {
  const auto n = static_cast<std::int64_t>(ids.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n * image_size()));
  for (auto i : ids) {
    auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return ad::Tensor::from({n, height, width, 3}, std::move(out), dt);
}

ad::Tensor ImageSet::range(std::int64_t begin, std::int64_t n, ad::DType dt) const {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = begin + i;
  return batch(ids, dt);
}

void SyntheticSpec::validate() const {
  if (classes < 1) throw std::invalid_argument("synthetic: classes must be >= 1");
  if (images_per_class < 1) throw std::invalid_argument("synthetic: images_per_class must be >= 1");
  if (image_h < 1 || image_w < 1) throw std::invalid_argument("synthetic: image dims must be positive");
  if (!(noise_amplitude >= 0)) throw std::invalid_argument("synthetic: noise_amplitude must be >= 0");
}

std::vector<float> gen_image(const SyntheticSpec& spec, int class_id, int index) {
  spec.validate();
  if (class_id < 0 || class_id >= spec.classes)
    throw std::out_of_range("synthetic: class " + std::to_string(class_id) + " outside [0, " +
                            std::to_string(spec.classes) + ")");
  if (index < 0) throw std::out_of_range("synthetic: negative index");
  const double pi = std::numbers::pi;
  const double theta = class_id * pi / spec.classes;
  const double cycles = 1.5 + 0.75 * (class_id % 4);
  const double dx = std::cos(theta), dy = std::sin(theta);
  const double extent = std::max(spec.image_h, spec.image_w);
  Rng noise(splitmix64(spec.seed ^ splitmix64((static_cast<std::uint64_t>(class_id) << 32) |
                                              static_cast<std::uint32_t>(index))));
  std::vector<float> img(static_cast<std::size_t>(spec.image_h * spec.image_w * 3));
  std::size_t o = 0;
  for (int y = 0; y < spec.image_h; ++y)
    for (int x = 0; x < spec.image_w; ++x) {
      const double u = (x * dx + y * dy) / extent;
      for (int ch = 0; ch < 3; ++ch) {
        double v = 0.5 + 0.35 * std::sin(2 * pi * cycles * u + ch * 2 * pi / 3);
        if (spec.noise_amplitude > 0) v += noise.uniform(-spec.noise_amplitude, spec.noise_amplitude);
        img[o++] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

ImageSet gen_dataset(const SyntheticSpec& spec) {
  spec.validate();
  ImageSet set;
  set.height = spec.image_h;
  set.width = spec.image_w;
  for (int c = 0; c < spec.classes; ++c)
    for (int i = 0; i < spec.images_per_class; ++i) set.push(gen_image(spec, c, i), c);
  return set;
}

}  // namespace alitok::data
