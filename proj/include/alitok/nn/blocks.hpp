// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alitok/autodiff/ops.hpp"
#include "alitok/core/params.hpp"

namespace alitok::nn {

using ad::Tensor;

enum class MaskKind { Bidirectional, Causal };

const char* mask_name(MaskKind m);
MaskKind parse_mask(const std::string& s);

enum class RopeMode { None, OneD, TwoD };

/// Rotary coordinates of one sequence slot. OneD uses `row` only.
struct RopePosition {
  RopeMode mode = RopeMode::None;
  std::int64_t row = 0;
  std::int64_t col = 0;
};

struct RopeConfig {
  int head_dim = 0;
  double base = 10000.0;
  std::vector<RopePosition> positions;

  /// Slots 0..count-1 with 1D coordinates offset..offset+count-1.
  static RopeConfig one_d(int head_dim, std::int64_t count, std::int64_t offset = 0);
  /// Raster-scan grid; slot r*cols+c gets (r + offset, c + offset).
  static RopeConfig two_d(int head_dim, std::int64_t rows, std::int64_t cols, std::int64_t offset = 0);

  void validate() const;
  /// Rotation angles [len, head_dim/2] for slots begin..begin+len-1.
  Tensor angles(ad::DType dt, std::int64_t begin, std::int64_t len) const;
};

/// Rotates q or k shaped [..., seq, heads, head_dim] by the slots 0..seq-1 of cfg.
Tensor apply_rope(const Tensor& q_or_k, const RopeConfig& cfg, std::int64_t first_slot = 0);

struct BlockConfig {
  int width = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  bool qk_norm = true;
  double eps = 1e-6;

  void validate() const;
  int head_dim() const { return width / heads; }
  int hidden() const { return static_cast<int>(mlp_ratio * width); }
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // [width, width]
  Tensor q_gain, k_gain;  // [heads, head_dim]; unused without qk_norm
};

struct BlockWeights {
  Tensor attn_norm, mlp_norm;  // [width]
  AttentionWeights attn;
  Tensor w_up;    // [width, hidden]
  Tensor w_down;  // [hidden, width]
};

BlockWeights make_block(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng,
                        double init_std = 0.02);

/// Growable key/value store of one attention layer: [batch, heads, capacity, head_dim].
class LayerKVCache {
 public:
  LayerKVCache(ad::DType dt, std::int64_t batch, std::int64_t heads, std::int64_t capacity, std::int64_t head_dim);

  std::int64_t length() const { return length_; }
  std::int64_t capacity() const { return capacity_; }
  /// Appends k, v of shape [batch, heads, n, head_dim].
  void append(const Tensor& k, const Tensor& v);
  /// Stored keys or values [batch, heads, length, head_dim] as constant tensors.
  Tensor keys() const { return view(keys_); }
  Tensor values() const { return view(values_); }
  const ad::Buffer& raw_keys() const { return keys_; }
  const ad::Buffer& raw_values() const { return values_; }

 private:
  Tensor view(const ad::Buffer& src) const;

  ad::DType dtype_;
  std::int64_t batch_, heads_, capacity_, head_dim_;
  std::int64_t length_ = 0;
  ad::Buffer keys_, values_;
};

struct AttentionOutput {
  Tensor out;      // [batch, seq, width]
  Tensor weights;  // [batch, heads, seq, keys]
};

/// rms-normalised x times gain.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

/// Multi-head self-attention on x [batch, seq, width]. `rope` may be null. With a
/// cache, x holds the new slots only, their rope slots start at cache->length(),
/// and keys/values are appended before attending.
AttentionOutput attention(const Tensor& x, const AttentionWeights& w, const BlockConfig& cfg, MaskKind mask,
                          const RopeConfig* rope, LayerKVCache* cache = nullptr);

Tensor mlp(const Tensor& x, const BlockWeights& w);

struct BlockOutput {
  Tensor out;
  Tensor attn_weights;
};

BlockOutput transformer_block(const Tensor& x, const BlockWeights& w, const BlockConfig& cfg, MaskKind mask,
                              const RopeConfig* rope, LayerKVCache* cache = nullptr);

/// A stack of blocks sharing one config.
struct Stack {
  BlockConfig cfg;
  std::vector<BlockWeights> blocks;

  static Stack create(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, int depth, Rng& rng,
                      double init_std = 0.02);

  /// Runs every block; per-layer attention weights are appended to `attn` when given.
  Tensor forward(const Tensor& x, MaskKind mask, const RopeConfig* rope, std::vector<Tensor>* attn = nullptr,
                 std::vector<LayerKVCache>* caches = nullptr) const;
};

}  // namespace alitok::nn
