// SPDX-License-Identifier: Apache-2.0
#include "alitok/tokenizer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace alitok::tok {

using ad::Shape;

namespace {

// [n, w] -> [batch, n, w]
Tensor expand_batch(const Tensor& t, std::int64_t batch) {
  return ad::add(Tensor::zeros({batch, t.dim(0), t.dim(1)}, t.dtype()), t);
}

Tensor project_out(const Tensor& h, const ParamStore& p, const std::string& prefix, double eps) {
  Tensor y = ad::matmul(nn::rmsnorm(h, p.get(prefix + ".out_norm"), eps), p.get(prefix + ".to_patch"));
  return ad::add(y, p.get(prefix + ".out_bias"));
}

void check_images(const Tensor& images, const TokConfig& c) {
  if (images.rank() != 4 || images.dim(1) != c.image_h || images.dim(2) != c.image_w || images.dim(3) != 3)
    throw ad::ShapeError("tokenizer: expected [batch, " + std::to_string(c.image_h) + ", " +
                         std::to_string(c.image_w) + ", 3], got " + ad::shape_str(images.shape()));
}

ReconstructionOutput split_output(const Tensor& out, std::int64_t skip, const TokConfig& c) {
  ReconstructionOutput r;
  const std::int64_t k = c.prefix();
  if (k > 0) r.prefix_patches = ad::slice(out, 1, skip, k);
  r.grid_patches = ad::slice(out, 1, skip + k, c.grid());
  r.image = unpatchify(r.grid_patches, c.grid_h(), c.grid_w(), c.patch);
  return r;
}

}  // namespace

void TokConfig::validate() const {
  if (patch <= 0 || image_h <= 0 || image_w <= 0 || image_h % patch != 0 || image_w % patch != 0)
    throw std::invalid_argument("tokenizer: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                " not divisible by patch " + std::to_string(patch));
  if (image_h % 4 != 0 || image_w % 4 != 0)
    throw std::invalid_argument("tokenizer: image dims must be divisible by 4 for the feature loss");
  if (vocab < 2) throw std::invalid_argument("tokenizer: vocab must be >= 2");
  if (code_dim < 1) throw std::invalid_argument("tokenizer: code_dim must be >= 1");
  if (encoder_depth < 1 || decoder_depth < 1 || stage2_depth < 1)
    throw std::invalid_argument("tokenizer: depths must be >= 1");
  if (buffer_count < 0) throw std::invalid_argument("tokenizer: buffer_count must be >= 0");
  if (beta < 0) throw std::invalid_argument("tokenizer: beta must be >= 0");
  if (!(usage_decay > 0 && usage_decay < 1)) throw std::invalid_argument("tokenizer: usage_decay must lie in (0, 1)");
  if (aux_loss && !use_prefix) throw std::invalid_argument("tokenizer: aux_loss requires prefix tokens");
  encoder.validate();
  decoder.validate();
}

TokenizerModel TokenizerModel::create(const TokConfig& cfg, std::uint64_t seed, ad::DType dt) {
  cfg.validate();
  TokenizerModel m{cfg, ParamStore(dt), {}, {}, {}, {}};
  auto& p = m.params;
  Rng rng(seed);
  const std::int64_t we = cfg.encoder.width, wd = cfg.decoder.width, k = cfg.prefix(), g = cfg.grid();
  const double s = cfg.init_std;

  p.add_normal("enc.patch_proj", {cfg.patch_dim(), we}, s, rng);
  if (k > 0) p.add_normal("enc.prefix", {k, we}, s, rng);
  p.add_normal("enc.latent", {g, we}, s, rng);
  p.add_normal("enc.pos", {k + 2 * g, we}, s, rng);
  m.encoder = nn::Stack::create(p, "enc.blocks", cfg.encoder, cfg.encoder_depth, rng, s);
  p.add_ones("enc.out_norm", {we});
  p.add_normal("enc.to_code", {we, cfg.code_dim}, s, rng);

  // Codes start near unit scale so the first batches spread over the codebook.
  m.codebook = vq::Codebook::wrap(p.add_normal("codebook", {cfg.vocab, cfg.code_dim}, 1.0, rng));

  auto decoder = [&](const std::string& name, int depth, std::int64_t extra) {
    p.add_normal(name + ".from_code", {cfg.code_dim, wd}, s, rng);
    if (extra > 0) p.add_normal(name + ".buffer", {extra, wd}, s, rng);
    p.add_normal(name + ".pos", {extra + k + g, wd}, s, rng);
    nn::Stack st = nn::Stack::create(p, name + ".blocks", cfg.decoder, depth, rng, s);
    p.add_ones(name + ".out_norm", {wd});
    p.add_normal(name + ".to_patch", {wd, cfg.patch_dim()}, s, rng);
    p.add_zeros(name + ".out_bias", {cfg.patch_dim()});
    return st;
  };
  m.decoder1 = decoder("dec1", cfg.decoder_depth, 0);
  m.decoder2 = decoder("dec2", cfg.stage2_depth, cfg.buffer_count);
  return m;
}

Tensor patchify(const Tensor& images, int f) {
  if (images.rank() != 4) throw ad::ShapeError("patchify: expected [batch, h, w, c], got " + ad::shape_str(images.shape()));
  const auto b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (f <= 0 || h % f != 0 || w % f != 0)
    throw ad::ShapeError("patchify: image " + ad::shape_str(images.shape()) + " not divisible by patch " +
                         std::to_string(f));
  Tensor t = ad::reshape(images, {b, h / f, f, w / f, f, c});
  t = ad::permute(t, {0, 1, 3, 2, 4, 5});
  return ad::reshape(t, {b, (h / f) * (w / f), f * f * c});
}

Tensor unpatchify(const Tensor& patches, int grid_h, int grid_w, int f, int channels) {
  const auto b = patches.dim(0);
  if (patches.rank() != 3 || patches.dim(1) != static_cast<std::int64_t>(grid_h) * grid_w ||
      patches.dim(2) != static_cast<std::int64_t>(f) * f * channels)
    throw ad::ShapeError("unpatchify: patches " + ad::shape_str(patches.shape()) + " vs grid " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " patch " + std::to_string(f));
  Tensor t = ad::reshape(patches, {b, grid_h, grid_w, f, f, channels});
  t = ad::permute(t, {0, 1, 3, 2, 4, 5});
  return ad::reshape(t, {b, static_cast<std::int64_t>(grid_h) * f, static_cast<std::int64_t>(grid_w) * f, channels});
}

EncodedSequence encode(const Tensor& images, const TokenizerModel& m) {
  const auto& c = m.cfg;
  const auto& p = m.params;
  check_images(images, c);
  const std::int64_t b = images.dim(0), k = c.prefix(), g = c.grid();

  std::vector<Tensor> parts;
  if (k > 0) parts.push_back(expand_batch(p.get("enc.prefix"), b));
  parts.push_back(expand_batch(p.get("enc.latent"), b));
  parts.push_back(ad::matmul(patchify(images, c.patch), p.get("enc.patch_proj")));
  Tensor x = ad::add(ad::concat(parts, 1), p.get("enc.pos"));
  Tensor h = m.encoder.forward(x, nn::MaskKind::Bidirectional, nullptr);
  // Patch positions are dropped; only prefix and latent slots become tokens.
  h = ad::slice(h, 1, 0, k + g);
  EncodedSequence e;
  e.batch = b;
  e.continuous = ad::matmul(nn::rmsnorm(h, p.get("enc.out_norm"), c.encoder.eps), p.get("enc.to_code"));
  e.quant = vq::quantize(e.continuous, m.codebook);
  e.indices = e.quant.indices;
  return e;
}

Tensor codes_for(const std::vector<std::int64_t>& indices, std::int64_t batch, const TokenizerModel& m) {
  const std::int64_t l = m.cfg.seq_len();
  if (static_cast<std::int64_t>(indices.size()) != batch * l)
    throw ad::ShapeError("codes_for: " + std::to_string(indices.size()) + " indices for batch " +
                         std::to_string(batch) + " x " + std::to_string(l));
  for (auto i : indices)
    if (i < 0 || i >= m.cfg.vocab) throw std::out_of_range("codes_for: token id " + std::to_string(i));
  return ad::reshape(ad::gather_rows(m.codebook.vectors, indices), {batch, l, m.cfg.code_dim});
}

ReconstructionOutput decode_stage1(const Tensor& quantized, const TokenizerModel& m, bool keep_attention) {
  const auto& c = m.cfg;
  const auto& p = m.params;
  if (quantized.rank() != 3 || quantized.dim(1) != c.seq_len() || quantized.dim(2) != c.code_dim)
    throw ad::ShapeError("decode_stage1: expected [batch, " + std::to_string(c.seq_len()) + ", " +
                         std::to_string(c.code_dim) + "], got " + ad::shape_str(quantized.shape()));
  Tensor x = ad::add(ad::matmul(quantized, p.get("dec1.from_code")), p.get("dec1.pos"));
  std::vector<Tensor> attn;
  Tensor h = m.decoder1.forward(x, c.decoder_mask, nullptr, keep_attention ? &attn : nullptr);
  auto r = split_output(project_out(h, p, "dec1", c.decoder.eps), 0, c);
  r.attention = std::move(attn);
  return r;
}

ReconstructionOutput decode_stage2(const Tensor& quantized, const TokenizerModel& m, bool keep_attention) {
  const auto& c = m.cfg;
  const auto& p = m.params;
  if (quantized.rank() != 3 || quantized.dim(1) != c.seq_len() || quantized.dim(2) != c.code_dim)
    throw ad::ShapeError("decode_stage2: expected [batch, " + std::to_string(c.seq_len()) + ", " +
                         std::to_string(c.code_dim) + "], got " + ad::shape_str(quantized.shape()));
  Tensor x = ad::matmul(quantized, p.get("dec2.from_code"));
  if (c.buffer_count > 0) x = ad::concat({expand_batch(p.get("dec2.buffer"), quantized.dim(0)), x}, 1);
  x = ad::add(x, p.get("dec2.pos"));
  std::vector<Tensor> attn;
  Tensor h = m.decoder2.forward(x, nn::MaskKind::Bidirectional, nullptr, keep_attention ? &attn : nullptr);
  auto r = split_output(project_out(h, p, "dec2", c.decoder.eps), c.buffer_count, c);
  r.attention = std::move(attn);
  return r;
}

Tensor fixed_feature_loss(const Tensor& a, const Tensor& b, std::uint64_t seed) {
  if (a.shape() != b.shape()) throw ad::ShapeError("feature loss: " + ad::shape_str(a.shape()) + " vs " + ad::shape_str(b.shape()));
  const std::int64_t c0 = a.dim(3), c1 = 16, c2 = 32;
  Rng rng(seed);
  auto kernel = [&](std::int64_t in, std::int64_t out) {
    std::vector<double> w(static_cast<std::size_t>(in * out));
    for (auto& v : w) v = rng.normal() / std::sqrt(static_cast<double>(in));
    return Tensor::from({in, out}, std::move(w), a.dtype());
  };
  const Tensor w1 = kernel(4 * c0, c1), w2 = kernel(4 * c1, c2);
  const std::int64_t bsz = a.dim(0), h2 = a.dim(1) / 2, wd2 = a.dim(2) / 2;
  auto features = [&](const Tensor& x) {
    Tensor f1 = ad::silu(ad::matmul(patchify(x, 2), w1));
    Tensor f2 = ad::silu(ad::matmul(patchify(ad::reshape(f1, {bsz, h2, wd2, c1}), 2), w2));
    return std::pair{f1, f2};
  };
  auto [a1, a2] = features(a);
  auto [b1, b2] = features(b);
  return ad::scale(ad::add(ad::mse(a1, b1), ad::mse(a2, b2)), 0.5);
}

double recon_total(double mse, double perc, double quant, double adv, double lambda_adv) {
  return mse + perc + quant + lambda_adv * adv;
}

AuxLosses aux_losses(const Tensor& images, const ReconstructionOutput& rec, const TokConfig& c) {
  if (c.prefix() == 0) throw std::invalid_argument("aux_losses: configuration has no prefix tokens");
  const int f = c.patch;
  Tensor row1 = unpatchify(rec.prefix_patches, 1, c.grid_w(), f);
  Tensor composed = row1;
  if (c.grid_h() > 1) composed = ad::concat({row1, ad::detach(ad::slice(rec.image, 1, f, c.image_h - f))}, 1);
  return {ad::mse(row1, ad::slice(images, 1, 0, f)), fixed_feature_loss(composed, images, c.feature_seed)};
}

LossParts loss_stage1(const Tensor& images, const TokenizerModel& m, EncodedSequence* enc_out) {
  const auto& c = m.cfg;
  EncodedSequence enc = encode(images, m);
  auto rec = decode_stage1(enc.quant.ste_output, m);
  Tensor mse = ad::mse(rec.image, images);
  Tensor perc = fixed_feature_loss(rec.image, images, c.feature_seed);
  Tensor quant = vq::quant_loss(enc.continuous, enc.quant, c.beta);
  LossParts out;
  out.total = ad::add(ad::add(mse, perc), quant);
  out.mse = mse.item();
  out.perc = perc.item();
  out.quant = quant.item();
  if (c.use_prefix && c.aux_loss) {
    auto aux = aux_losses(images, rec, c);
    out.total = ad::add(out.total, ad::add(aux.mse, aux.perc));
    out.aux_mse = aux.mse.item();
    out.aux_perc = aux.perc.item();
  }
  if (enc_out) *enc_out = std::move(enc);
  return out;
}

LossParts loss_stage2(const Tensor& images, const TokenizerModel& m) {
  Tensor q;
  {
    ad::NoGradGuard guard;
    q = encode(images, m).quant.quantized;
  }
  auto rec = decode_stage2(q, m);
  Tensor mse = ad::mse(rec.image, images);
  Tensor perc = fixed_feature_loss(rec.image, images, m.cfg.feature_seed);
  LossParts out;
  out.total = ad::add(mse, perc);
  out.mse = mse.item();
  out.perc = perc.item();
  return out;
}

std::vector<TokMetrics> train_tokenizer(TokenizerModel& m, const data::ImageSet& images, const TrainConfig& tc,
                                        const std::function<void(const TokMetrics&)>& on_step) {
  if (tc.stage != 1 && tc.stage != 2) throw std::invalid_argument("train_tokenizer: stage must be 1 or 2");
  if (tc.steps < 1 || tc.batch < 1) throw std::invalid_argument("train_tokenizer: steps and batch must be >= 1");
  if (images.count() == 0) throw std::invalid_argument("train_tokenizer: empty dataset");
  if (images.height != m.cfg.image_h || images.width != m.cfg.image_w)
    throw ad::ShapeError("train_tokenizer: dataset images are " + std::to_string(images.height) + "x" +
                         std::to_string(images.width));
  auto& p = m.params;
  const bool s1 = tc.stage == 1;
  p.set_trainable("enc.", s1);
  p.set_trainable("codebook", s1);
  p.set_trainable("dec1.", s1);
  p.set_trainable("dec2.", !s1);
  std::vector<Tensor> trainable;
  for (const auto& [name, t] : p.entries())
    if (t.requires_grad()) trainable.push_back(t);
  Adam opt(trainable, tc.optim);

  Rng root(tc.seed);
  Rng pick = root.fork(1), reinit_rng = root.fork(2);
  const double threshold = m.cfg.dead_fraction / m.cfg.vocab;
  std::vector<TokMetrics> log;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(tc.batch));
  for (long step = 0; step < tc.steps; ++step) {
    for (auto& i : ids) i = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(images.count())));
    Tensor x = images.batch(ids, m.dtype());
    EncodedSequence enc;
    LossParts parts = s1 ? loss_stage1(x, m, &enc) : loss_stage2(x, m);
    const double total = parts.total.item();
    if (!std::isfinite(total))
      throw ad::NonFiniteError("train_tokenizer: non-finite loss at step " + std::to_string(step) +
                               " (mse " + std::to_string(parts.mse) + ", quant " + std::to_string(parts.quant) + ")");
    parts.total.backward();
    opt.step(lr_at(tc.optim, step, tc.steps));
    double util = 0;
    if (s1) {
      if (m.cfg.reinit) {
        auto rep = vq::update_usage_and_reinit(m.codebook, enc.indices, ad::detach(enc.continuous), m.cfg.usage_decay,
                                               threshold, reinit_rng);
        for (auto row : rep.rows) opt.reset_row(m.codebook.vectors, row);
      }
      util = vq::utilization(m.cfg.vocab, enc.indices);
    }
    TokMetrics r{step, total, parts.mse, parts.perc, parts.quant, parts.aux_mse, parts.aux_perc, util};
    log.push_back(r);
    if (on_step) on_step(r);
  }
  p.set_trainable("", true);
  return log;
}

std::vector<std::int64_t> encode_all(const TokenizerModel& m, const data::ImageSet& images, int chunk) {
  ad::NoGradGuard guard;
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(images.count() * m.cfg.seq_len()));
  for (std::int64_t b = 0; b < images.count(); b += chunk) {
    const auto n = std::min<std::int64_t>(chunk, images.count() - b);
    auto e = encode(images.range(b, n, m.dtype()), m);
    out.insert(out.end(), e.indices.begin(), e.indices.end());
  }
  return out;
}

namespace {

struct RowSums {
  double first = 0, rest = 0;
  std::int64_t images = 0;

  void add(const Tensor& target, const Tensor& recon, int patch) {
    if (target.shape() != recon.shape() || target.rank() != 4)
      throw ad::ShapeError("row error: shapes " + ad::shape_str(target.shape()) + " and " + ad::shape_str(recon.shape()));
    const std::int64_t img_px = target.dim(1) * target.dim(2) * target.dim(3);
    const std::int64_t row_px = std::min<std::int64_t>(patch, target.dim(1)) * target.dim(2) * target.dim(3);
    const auto t = target.to_vector(), y = recon.to_vector();
    for (std::int64_t i = 0; i < target.dim(0); ++i)
      for (std::int64_t j = 0; j < img_px; ++j) {
        const double d = y[static_cast<std::size_t>(i * img_px + j)] - t[static_cast<std::size_t>(i * img_px + j)];
        (j < row_px ? first : rest) += d * d;
      }
    images += target.dim(0);
  }

  ReconError result(std::int64_t image_h, std::int64_t image_w, int patch) const {
    const double row_px = static_cast<double>(std::min<std::int64_t>(patch, image_h) * image_w * 3);
    const double img_px = static_cast<double>(image_h * image_w * 3);
    const double n = static_cast<double>(images);
    ReconError r;
    r.first_row = first / (n * row_px);
    r.rest = img_px > row_px ? rest / (n * (img_px - row_px)) : 0.0;
    r.total = (first + rest) / (n * img_px);
    return r;
  }
};

}  // namespace

ReconError split_error(const Tensor& target, const Tensor& recon, int patch) {
  if (patch < 1) throw std::invalid_argument("split_error: patch must be positive");
  RowSums s;
  s.add(target, recon, patch);
  if (s.images == 0) throw std::invalid_argument("split_error: no images");
  return s.result(target.dim(1), target.dim(2), patch);
}

ReconError reconstruction_error(const TokenizerModel& m, const data::ImageSet& images, int stage, int chunk) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("reconstruction_error: stage must be 1 or 2");
  if (images.count() == 0) throw std::invalid_argument("reconstruction_error: no images");
  ad::NoGradGuard guard;
  RowSums s;
  for (std::int64_t b = 0; b < images.count(); b += chunk) {
    const auto n = std::min<std::int64_t>(chunk, images.count() - b);
    Tensor x = images.range(b, n, m.dtype());
    auto e = encode(x, m);
    auto rec = stage == 1 ? decode_stage1(e.quant.quantized, m) : decode_stage2(e.quant.quantized, m);
    s.add(x, rec.image, m.cfg.patch);
  }
  return s.result(m.cfg.image_h, m.cfg.image_w, m.cfg.patch);
}

const char* metrics_header() { return "step,loss_total,mse,perc,quant,aux_mse,aux_perc,utilization"; }

std::string metrics_row(const TokMetrics& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g", r.step, r.total, r.mse, r.perc, r.quant,
                r.aux_mse, r.aux_perc, r.utilization);
  return buf;
}

}  // namespace alitok::tok
