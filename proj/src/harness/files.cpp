// SPDX-License-Identifier: Apache-2.0
#include "alitok/harness/files.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "le.hpp"

namespace alitok::harness {

namespace fs = std::filesystem;

void atomic_write(const std::string& path, std::string_view bytes) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("cannot rename onto " + path + ": " + ec.message());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint8_t quantize_pixel(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("ppm: non-finite pixel");
  v = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::round(v));  // std::round is half away from zero
}

std::string encode_ppm(std::span<const float> rgb, int height, int width) {
  if (height < 1 || width < 1 || rgb.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * 3)
    throw std::invalid_argument("ppm: pixel count does not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  const auto header = out.size();
  out.resize(header + rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) out[header + i] = static_cast<char>(quantize_pixel(rgb[i]));
  return out;
}

void write_ppm(std::span<const float> rgb, int height, int width, const std::string& path) {
  atomic_write(path, encode_ppm(rgb, height, width));
}

PpmImage read_ppm(const std::string& path) {
  const std::string s = read_file(path);
  std::istringstream in(s);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (!in || magic != "P6" || maxv != 255 || w < 1 || h < 1) throw std::runtime_error("ppm: bad header in " + path);
  in.get();
  const auto off = static_cast<std::size_t>(in.tellg());
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (s.size() != off + n) throw std::runtime_error("ppm: bad payload size in " + path);
  PpmImage img{h, w, std::vector<std::uint8_t>(n)};
  std::memcpy(img.bytes.data(), s.data() + off, n);
  return img;
}

std::string encode_tokens(const ar::TokenDataset& ds) {
  ds.validate();
  if (ds.vocab > 65536 || ds.classes > 65535) throw std::invalid_argument("token file: ids exceed u16");
  Writer w;
  const auto count = static_cast<std::uint32_t>(ds.labels.size());
  w.u32(count);
  w.u32(static_cast<std::uint32_t>(ds.seq_len));
  w.u32(static_cast<std::uint32_t>(ds.vocab));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  const auto t = static_cast<std::size_t>(ds.seq_len);
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t j = 0; j < t; ++j) w.u16(static_cast<std::uint16_t>(ds.tokens[r * t + j]));
    w.u16(static_cast<std::uint16_t>(ds.labels[r]));
  }
  return std::move(w.out);
}

ar::TokenDataset decode_tokens(std::string_view bytes) {
  Reader r(bytes, "token file");
  ar::TokenDataset ds;
  const auto count = r.u32();
  ds.seq_len = static_cast<int>(r.u32());
  ds.vocab = static_cast<int>(r.u32());
  ds.classes = static_cast<int>(r.u32());
  const auto t = static_cast<std::size_t>(ds.seq_len);
  if (r.remaining() != static_cast<std::size_t>(count) * (t + 1) * 2) throw std::runtime_error("token file: size mismatch");
  ds.tokens.reserve(count * t);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < t; ++j) ds.tokens.push_back(r.u16());
    ds.labels.push_back(r.u16());
  }
  ds.validate();
  return ds;
}

void save_tokens(const ar::TokenDataset& ds, const std::string& path) { atomic_write(path, encode_tokens(ds)); }
ar::TokenDataset load_tokens(const std::string& path) { return decode_tokens(read_file(path)); }

void save_images(const data::ImageSet& set, const std::string& path) {
  Writer w;
  w.bytes("ALIM");
  w.u32(static_cast<std::uint32_t>(set.count()));
  w.u32(static_cast<std::uint32_t>(set.height));
  w.u32(static_cast<std::uint32_t>(set.width));
  for (int l : set.labels) w.u16(static_cast<std::uint16_t>(l));
  for (float p : set.pixels) w.u32(std::bit_cast<std::uint32_t>(p));
  atomic_write(path, w.out);
}

data::ImageSet load_images(const std::string& path) {
  const std::string s = read_file(path);
  Reader r(s, "image file");
  if (r.bytes(4) != "ALIM") throw std::runtime_error("image file: bad magic in " + path);
  const auto count = r.u32();
  data::ImageSet set;
  set.height = r.u32();
  set.width = r.u32();
  const auto n = static_cast<std::size_t>(count) * static_cast<std::size_t>(set.image_size());
  if (r.remaining() != count * 2 + n * 4) throw std::runtime_error("image file: size mismatch in " + path);
  for (std::size_t i = 0; i < count; ++i) set.labels.push_back(r.u16());
  set.pixels.resize(n);
  for (auto& p : set.pixels) p = std::bit_cast<float>(r.u32());
  return set;
}

}  // namespace alitok::harness
