// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace alitok::harness {

/// Little-endian byte sink.
struct Writer {
  std::string out;
  void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::string_view s) { out.append(s); }
};

/// Bounds-checked little-endian reader; running past the end throws E.
template <class E = std::runtime_error>
class BasicReader {
 public:
  BasicReader(std::string_view s, std::string what) : s_(s), what_(std::move(what)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(take(2))); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(take(4))); }
  std::uint64_t u64() { return le(take(8)); }
  std::string_view bytes(std::size_t n) { return take(n); }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  std::string_view take(std::size_t n) {
    if (n > remaining()) throw E(what_ + ": truncated");
    auto v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  static std::uint64_t le(std::string_view b) {
    std::uint64_t v = 0;
    for (std::size_t i = b.size(); i-- > 0;) v = (v << 8) | static_cast<std::uint8_t>(b[i]);
    return v;
  }
  std::string_view s_;
  std::size_t pos_ = 0;
  std::string what_;
};
using Reader = BasicReader<>;

}  // namespace alitok::harness
