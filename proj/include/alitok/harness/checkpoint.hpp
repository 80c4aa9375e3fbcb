// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alitok/ar/model.hpp"
#include "alitok/tokenizer/tokenizer.hpp"

namespace alitok::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Truncated, malformed or wrong-magic file.
struct CorruptCheckpointError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct VersionMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};
/// Stored tensors disagree with the embedded configuration.
struct ShapeMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::string config;  // UTF-8 JSON
  std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

/// "ALTK", u32 version, u32 config length, config, u32 tensor count, then per
/// tensor: u32 name length, name, u32 rank, u32 dims, u8 dtype (0 f32, 1 f64),
/// little-endian payload.
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_tokenizer(const tok::TokenizerModel& m, const std::string& path);
tok::TokenizerModel load_tokenizer(const std::string& path);
void save_ar(const ar::ARModel& m, const std::string& path);
ar::ARModel load_ar(const std::string& path);

}  // namespace alitok::harness
