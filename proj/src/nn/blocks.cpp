// SPDX-License-Identifier: Apache-2.0
#include "alitok/nn/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace alitok::nn {

using ad::Shape;

const char* mask_name(MaskKind m) { return m == MaskKind::Causal ? "causal" : "bidirectional"; }

MaskKind parse_mask(const std::string& s) {
  if (s == "causal") return MaskKind::Causal;
  if (s == "bidirectional") return MaskKind::Bidirectional;
  throw std::invalid_argument("unknown mask kind '" + s + "'");
}

// ------------------------------------------------------------------ rope

RopeConfig RopeConfig::one_d(int head_dim, std::int64_t count, std::int64_t offset) {
  RopeConfig cfg;
  cfg.head_dim = head_dim;
  for (std::int64_t i = 0; i < count; ++i) cfg.positions.push_back({RopeMode::OneD, offset + i, 0});
  return cfg;
}

RopeConfig RopeConfig::two_d(int head_dim, std::int64_t rows, std::int64_t cols, std::int64_t offset) {
  RopeConfig cfg;
  cfg.head_dim = head_dim;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) cfg.positions.push_back({RopeMode::TwoD, r + offset, c + offset});
  return cfg;
}

void RopeConfig::validate() const {
  if (head_dim <= 0 || head_dim % 2 != 0)
    throw std::invalid_argument("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  if (!(base > 0)) throw std::invalid_argument("rope: base must be positive");
  for (const auto& p : positions) {
    if (p.mode == RopeMode::TwoD && head_dim % 4 != 0)
      throw std::invalid_argument("rope: 2D mode needs head_dim divisible by 4, got " + std::to_string(head_dim));
    if (p.row < 0 || p.col < 0) throw std::invalid_argument("rope: negative position coordinate");
  }
}

Tensor RopeConfig::angles(ad::DType dt, std::int64_t begin, std::int64_t len) const {
  validate();
  if (begin < 0 || begin + len > static_cast<std::int64_t>(positions.size()))
    throw std::invalid_argument("rope: missing positions for slots [" + std::to_string(begin) + ", " +
                                std::to_string(begin + len) + ")");
  const std::int64_t pairs = head_dim / 2;
  const std::int64_t quarter = head_dim / 4;
  std::vector<double> out(static_cast<std::size_t>(len * pairs), 0.0);
  for (std::int64_t s = 0; s < len; ++s) {
    const auto& p = positions[static_cast<std::size_t>(begin + s)];
    double* row = out.data() + s * pairs;
    switch (p.mode) {
      case RopeMode::None:
        break;
      case RopeMode::OneD:
        for (std::int64_t j = 0; j < pairs; ++j)
          row[j] = static_cast<double>(p.row) * std::pow(base, -2.0 * static_cast<double>(j) / head_dim);
        break;
      case RopeMode::TwoD:
        // First half of the pairs follows the row coordinate, second half the column.
        for (std::int64_t j = 0; j < quarter; ++j) {
          const double theta = std::pow(base, -2.0 * static_cast<double>(j) / (head_dim / 2.0));
          row[j] = static_cast<double>(p.row) * theta;
          row[quarter + j] = static_cast<double>(p.col) * theta;
        }
        break;
    }
  }
  return Tensor::from({len, pairs}, std::move(out), dt);
}

Tensor apply_rope(const Tensor& q_or_k, const RopeConfig& cfg, std::int64_t first_slot) {
  if (q_or_k.dim(-1) != cfg.head_dim)
    throw ad::ShapeError("apply_rope: head_dim " + std::to_string(q_or_k.dim(-1)) + " vs config " +
                         std::to_string(cfg.head_dim));
  return ad::rotary(q_or_k, cfg.angles(q_or_k.dtype(), first_slot, q_or_k.dim(-3)));
}

// ------------------------------------------------------------------ config & params

void BlockConfig::validate() const {
  if (width <= 0 || heads <= 0 || width % heads != 0)
    throw std::invalid_argument("block: width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  if (!(mlp_ratio > 0)) throw std::invalid_argument("block: mlp_ratio must be positive");
  if (!(eps > 0)) throw std::invalid_argument("block: eps must be positive");
}

BlockWeights make_block(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng,
                        double init_std) {
  cfg.validate();
  const std::int64_t w = cfg.width, h = cfg.hidden();
  BlockWeights b;
  b.attn_norm = store.add_ones(prefix + ".attn_norm", {w});
  b.attn.wq = store.add_normal(prefix + ".attn.wq", {w, w}, init_std, rng);
  b.attn.wk = store.add_normal(prefix + ".attn.wk", {w, w}, init_std, rng);
  b.attn.wv = store.add_normal(prefix + ".attn.wv", {w, w}, init_std, rng);
  b.attn.wo = store.add_normal(prefix + ".attn.wo", {w, w}, init_std, rng);
  if (cfg.qk_norm) {
    b.attn.q_gain = store.add_ones(prefix + ".attn.q_gain", {cfg.heads, cfg.head_dim()});
    b.attn.k_gain = store.add_ones(prefix + ".attn.k_gain", {cfg.heads, cfg.head_dim()});
  }
  b.mlp_norm = store.add_ones(prefix + ".mlp_norm", {w});
  b.w_up = store.add_normal(prefix + ".mlp.w_up", {w, h}, init_std, rng);
  b.w_down = store.add_normal(prefix + ".mlp.w_down", {h, w}, init_std, rng);
  return b;
}

// ------------------------------------------------------------------ kv cache

LayerKVCache::LayerKVCache(ad::DType dt, std::int64_t batch, std::int64_t heads, std::int64_t capacity,
                           std::int64_t head_dim)
    : dtype_(dt),
      batch_(batch),
      heads_(heads),
      capacity_(capacity),
      head_dim_(head_dim),
      keys_(dt, static_cast<std::size_t>(batch * heads * capacity * head_dim)),
      values_(dt, static_cast<std::size_t>(batch * heads * capacity * head_dim)) {}

void LayerKVCache::append(const Tensor& k, const Tensor& v) {
  const Shape expect{batch_, heads_, k.dim(2), head_dim_};
  if (k.shape() != expect || v.shape() != expect)
    throw ad::ShapeError("kv cache: append shape " + ad::shape_str(k.shape()) + " vs cache " +
                         ad::shape_str(expect));
  const auto n = k.dim(2);
  if (length_ + n > capacity_) throw std::length_error("kv cache: capacity exceeded");
  ad::dispatch(dtype_, [&]<class T>() {
    auto ks = k.values<T>();
    auto vs = v.values<T>();
    auto kd = keys_.as<T>();
    auto vd = values_.as<T>();
    for (std::int64_t bh = 0; bh < batch_ * heads_; ++bh)
      for (std::int64_t i = 0; i < n; ++i) {
        const auto src = (bh * n + i) * head_dim_;
        const auto dst = (bh * capacity_ + length_ + i) * head_dim_;
        std::copy_n(ks.begin() + src, head_dim_, kd.begin() + dst);
        std::copy_n(vs.begin() + src, head_dim_, vd.begin() + dst);
      }
  });
  length_ += n;
}

Tensor LayerKVCache::view(const ad::Buffer& src) const {
  return ad::dispatch(dtype_, [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(batch_ * heads_ * length_ * head_dim_));
    auto s = src.as<T>();
    for (std::int64_t bh = 0; bh < batch_ * heads_; ++bh)
      std::copy_n(s.begin() + bh * capacity_ * head_dim_, length_ * head_dim_,
                  out.begin() + bh * length_ * head_dim_);
    if constexpr (std::is_same_v<T, double>)
      return Tensor::from({batch_, heads_, length_, head_dim_}, std::move(out), ad::DType::F64);
    else
      return Tensor::from({batch_, heads_, length_, head_dim_}, std::move(out));
  });
}

// ------------------------------------------------------------------ layers

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  return ad::mul(ad::rms_normalize(x, eps), gain);
}

AttentionOutput attention(const Tensor& x, const AttentionWeights& w, const BlockConfig& cfg, MaskKind mask,
                          const RopeConfig* rope, LayerKVCache* cache) {
  if (x.rank() != 3 || x.dim(2) != cfg.width)
    throw ad::ShapeError("attention: expected [batch, seq, " + std::to_string(cfg.width) + "], got " +
                         ad::shape_str(x.shape()));
  const std::int64_t b = x.dim(0), s = x.dim(1), h = cfg.heads, hd = cfg.head_dim();
  const std::int64_t first_slot = cache ? cache->length() : 0;

  auto heads_of = [&](const Tensor& proj, const Tensor* gain) {
    Tensor t = ad::reshape(ad::matmul(x, proj), {b, s, h, hd});
    if (gain) {
      if (cfg.qk_norm) t = rmsnorm(t, *gain, cfg.eps);
      if (rope) t = apply_rope(t, *rope, first_slot);
    }
    return ad::permute(t, {0, 2, 1, 3});  // [b, h, s, hd]
  };
  Tensor q = heads_of(w.wq, &w.q_gain);
  Tensor k = heads_of(w.wk, &w.k_gain);
  Tensor v = heads_of(w.wv, nullptr);
  if (cache) {
    cache->append(k, v);
    k = cache->keys();
    v = cache->values();
  }
  // Causal rows always keep at least the diagonal visible.
  if (mask == MaskKind::Causal && k.dim(2) < s) throw std::logic_error("attention: causal row with no visible key");
  Tensor scores = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor probs = ad::softmax(scores, mask == MaskKind::Causal ? ad::SoftmaxMask::Causal : ad::SoftmaxMask::None);
  Tensor ctx = ad::reshape(ad::permute(ad::matmul(probs, v), {0, 2, 1, 3}), {b, s, cfg.width});
  return {ad::matmul(ctx, w.wo), probs};
}

Tensor mlp(const Tensor& x, const BlockWeights& w) { return ad::matmul(ad::silu(ad::matmul(x, w.w_up)), w.w_down); }

BlockOutput transformer_block(const Tensor& x, const BlockWeights& w, const BlockConfig& cfg, MaskKind mask,
                              const RopeConfig* rope, LayerKVCache* cache) {
  auto att = attention(rmsnorm(x, w.attn_norm, cfg.eps), w.attn, cfg, mask, rope, cache);
  Tensor mid = ad::add(x, att.out);
  Tensor out = ad::add(mid, mlp(rmsnorm(mid, w.mlp_norm, cfg.eps), w));
  return {out, att.weights};
}

Stack Stack::create(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, int depth, Rng& rng,
                    double init_std) {
  Stack st;
  st.cfg = cfg;
  for (int i = 0; i < depth; ++i)
    st.blocks.push_back(make_block(store, prefix + "." + std::to_string(i), cfg, rng, init_std));
  return st;
}

Tensor Stack::forward(const Tensor& x, MaskKind mask, const RopeConfig* rope, std::vector<Tensor>* attn,
                      std::vector<LayerKVCache>* caches) const {
  if (caches && caches->size() != blocks.size()) throw std::invalid_argument("stack: cache count != depth");
  Tensor h = x;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto r = transformer_block(h, blocks[i], cfg, mask, rope, caches ? &(*caches)[i] : nullptr);
    if (attn) attn->push_back(r.attn_weights);
    h = r.out;
  }
  return h;
}

}  // namespace alitok::nn
