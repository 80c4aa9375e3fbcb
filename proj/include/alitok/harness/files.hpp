// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "alitok/ar/model.hpp"
#include "alitok/data/images.hpp"

namespace alitok::harness {

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
void atomic_write(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

/// Clamps to [0, 1], scales by 255 and rounds half away from zero.
std::uint8_t quantize_pixel(double v);

/// Binary "P6" image, max value 255, row-major RGB. `rgb` is [h, w, 3] in [0, 1].
std::string encode_ppm(std::span<const float> rgb, int height, int width);
void write_ppm(std::span<const float> rgb, int height, int width, const std::string& path);

struct PpmImage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> bytes;  // [h, w, 3]
};
PpmImage read_ppm(const std::string& path);

/// Token dataset file: u32 count, seq_len, vocab, classes, then per record
/// seq_len u16 token ids and one u16 class id, little-endian.
std::string encode_tokens(const ar::TokenDataset& ds);
ar::TokenDataset decode_tokens(std::string_view bytes);
void save_tokens(const ar::TokenDataset& ds, const std::string& path);
ar::TokenDataset load_tokens(const std::string& path);

/// Image set file: "ALIM", u32 count, height, width, then u16 labels and
/// f32 pixels, little-endian.
void save_images(const data::ImageSet& set, const std::string& path);
data::ImageSet load_images(const std::string& path);

}  // namespace alitok::harness
