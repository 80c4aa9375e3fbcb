// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "alitok/tokenizer/tokenizer.hpp"

namespace alitok::testing {

/// Stage-1 loss recomposed from primitives with every stop-gradient value and
/// every code index frozen at the base parameters. Its exact derivative is the
/// straight-through gradient, so central differences can check all parameters.
class Stage1Oracle {
 public:
  Stage1Oracle(const tok::TokenizerModel& m, const ad::Tensor& x) : m_(m), x_(x) {
    ad::NoGradGuard guard;
    auto enc = tok::encode(x, m);
    indices_ = enc.indices;
    z0_ = ad::detach(enc.continuous);
    q0_ = ad::detach(enc.quant.quantized);
    shift_ = ad::sub(q0_, z0_);
    const int f = m.cfg.patch;
    rest_rows_ = ad::slice(tok::decode_stage1(enc.quant.ste_output, m).image, 1, f, m.cfg.image_h - f);
  }

  ad::Tensor operator()() const {
    const auto& c = m_.cfg;
    const int f = c.patch;
    ad::Tensor z = tok::encode(x_, m_).continuous;
    ad::Tensor q = ad::reshape(ad::gather_rows(m_.codebook.vectors, indices_), z.shape());
    auto rec = tok::decode_stage1(ad::add(z, shift_), m_);
    const double d = static_cast<double>(c.code_dim);
    ad::Tensor quant = ad::scale(ad::add(ad::mse(z0_, q), ad::scale(ad::mse(z, q0_), c.beta)), d);
    ad::Tensor loss = ad::add(ad::add(ad::mse(rec.image, x_), tok::fixed_feature_loss(rec.image, x_, c.feature_seed)), quant);
    if (!c.aux_loss) return loss;
    ad::Tensor row1 = tok::unpatchify(rec.prefix_patches, 1, c.grid_w(), f);
    ad::Tensor aux = ad::add(ad::mse(row1, ad::slice(x_, 1, 0, f)),
                             tok::fixed_feature_loss(ad::concat({row1, rest_rows_}, 1), x_, c.feature_seed));
    return ad::add(loss, aux);
  }

 private:
  const tok::TokenizerModel& m_;
  ad::Tensor x_;
  std::vector<std::int64_t> indices_;
  ad::Tensor z0_, q0_, shift_, rest_rows_;
};

}  // namespace alitok::testing
