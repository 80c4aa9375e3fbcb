// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "alitok/core/optim.hpp"
#include "alitok/core/params.hpp"
#include "alitok/data/images.hpp"
#include "alitok/nn/blocks.hpp"
#include "alitok/vq/codebook.hpp"

namespace alitok::tok {

using ad::Tensor;

struct TokConfig {
  int image_h = 32;
  int image_w = 32;
  int patch = 4;
  /// When false the prefix row is absent (K = 0); used by the no-prefix ablations.
  bool use_prefix = true;
  /// Supervise prefix outputs with the first-row auxiliary losses.
  bool aux_loss = true;
  int vocab = 64;
  int code_dim = 8;
  nn::BlockConfig encoder{};
  int encoder_depth = 2;
  nn::BlockConfig decoder{};
  int decoder_depth = 2;
  nn::MaskKind decoder_mask = nn::MaskKind::Causal;
  int stage2_depth = 2;
  int buffer_count = 16;
  double beta = 0.25;
  /// Adversarial weight, kept for parity; the adversarial term is not trained.
  double lambda_adv = 0.1;
  std::uint64_t feature_seed = 1234;
  double usage_decay = 0.99;
  /// Reinit threshold as a multiple of 1/V.
  double dead_fraction = 0.03;
  bool reinit = true;
  double init_std = 0.02;

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int grid() const { return grid_h() * grid_w(); }
  int prefix() const { return use_prefix ? grid_w() : 0; }
  int seq_len() const { return prefix() + grid(); }
  int patch_dim() const { return patch * patch * 3; }
  void validate() const;
};

/// Encoder, codebook and both decoders. Parameter names: "enc.*", "codebook",
/// "dec1.*" (causal stage-1 decoder) and "dec2.*" (stage-2 decoder).
struct TokenizerModel {
  TokConfig cfg;
  ParamStore params;
  vq::Codebook codebook;
  nn::Stack encoder, decoder1, decoder2;

  static TokenizerModel create(const TokConfig& cfg, std::uint64_t seed, ad::DType dt = ad::DType::F32);
  ad::DType dtype() const { return params.dtype(); }
};

struct EncodedSequence {
  std::vector<std::int64_t> indices;  // [batch * seq_len]
  Tensor continuous;                  // [batch, seq_len, d_c] pre-quantization
  vq::QuantizeResult quant;           // quantized / ste_output shaped like `continuous`
  std::int64_t batch = 0;
};

struct ReconstructionOutput {
  Tensor prefix_patches;  // [batch, K, f*f*3]
  Tensor grid_patches;    // [batch, H*W, f*f*3]
  Tensor image;           // [batch, image_h, image_w, 3]
  std::vector<Tensor> attention;  // per decoder layer, when requested
};

/// [B, h, w, c] -> [B, (h/f)*(w/f), f*f*c], raster order, channel-last inside a patch.
Tensor patchify(const Tensor& images, int f);
/// Inverse of patchify for a grid_h x grid_w grid.
Tensor unpatchify(const Tensor& patches, int grid_h, int grid_w, int f, int channels = 3);

EncodedSequence encode(const Tensor& images, const TokenizerModel& m);
/// Looks up codes for precomputed indices (no encoder pass).
Tensor codes_for(const std::vector<std::int64_t>& indices, std::int64_t batch, const TokenizerModel& m);

ReconstructionOutput decode_stage1(const Tensor& quantized, const TokenizerModel& m, bool keep_attention = false);
ReconstructionOutput decode_stage2(const Tensor& quantized, const TokenizerModel& m, bool keep_attention = false);

/// MSE between the features of a frozen random two-layer strided convolution
/// (2x2 kernels, stride 2, SiLU), averaged over both layers.
Tensor fixed_feature_loss(const Tensor& a, const Tensor& b, std::uint64_t seed);

struct LossParts {
  Tensor total;
  double mse = 0, perc = 0, quant = 0, aux_mse = 0, aux_perc = 0;
};

/// mse + perc + quant + lambda_adv * adv.
double recon_total(double mse, double perc, double quant, double adv, double lambda_adv);

struct AuxLosses {
  Tensor mse, perc;
};
/// First-row terms: the prefix outputs form patch row 1, which is scored alone
/// (mse) and inside a full image whose other rows are the detached grid output (perc).
AuxLosses aux_losses(const Tensor& images, const ReconstructionOutput& rec, const TokConfig& cfg);

/// Sum of reconstruction, perceptual, quantization and (when enabled) the two
/// first-row auxiliary terms. `enc` is filled with the encoding used.
LossParts loss_stage1(const Tensor& images, const TokenizerModel& m, EncodedSequence* enc = nullptr);
LossParts loss_stage2(const Tensor& images, const TokenizerModel& m);

struct TrainConfig {
  int stage = 1;
  long steps = 1000;
  int batch = 8;
  std::uint64_t seed = 0;
  OptimizerConfig optim{};
};

struct TokMetrics {
  long step;
  double total, mse, perc, quant, aux_mse, aux_perc, utilization;
};

/// Minibatch training. Stage 1 trains encoder, codebook and causal decoder;
/// stage 2 freezes those and trains only "dec2.*". `on_step` sees every row.
std::vector<TokMetrics> train_tokenizer(TokenizerModel& m, const data::ImageSet& images, const TrainConfig& tc,
                                        const std::function<void(const TokMetrics&)>& on_step = {});

/// Indices for every image, [count * seq_len], encoded in fixed-size chunks.
std::vector<std::int64_t> encode_all(const TokenizerModel& m, const data::ImageSet& images, int chunk = 16);

/// Mean pixel MSE of the reconstruction of every image, split into the first
/// patch row and the remaining rows; whole-image MSE is also reported.
struct ReconError {
  double total = 0, first_row = 0, rest = 0;
};
/// The same split for a given pair of [n, h, w, 3] image tensors.
ReconError split_error(const Tensor& target, const Tensor& recon, int patch);
ReconError reconstruction_error(const TokenizerModel& m, const data::ImageSet& images, int stage, int chunk = 16);

const char* metrics_header();
std::string metrics_row(const TokMetrics& r);

}  // namespace alitok::tok
