// SPDX-License-Identifier: Apache-2.0
#include "alitok/analysis/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <future>
#include <stdexcept>

namespace alitok::analysis {

using Grid = std::array<std::array<double, 3>, 3>;

namespace {

double causal_share_of(const Grid& g) {
  // Mirrored summation order: a point-symmetric map gives exactly 0.5.
  const double causal = (g[0][0] + g[0][1]) + (g[0][2] + g[1][0]);
  const double anti = (g[2][2] + g[2][1]) + (g[2][0] + g[1][2]);
  return causal + anti > 0 ? causal / (causal + anti) : 0.0;
}

}  // namespace

AsymmetryReport attention_asymmetry(const std::vector<Tensor>& attention, std::int64_t grid_offset, int grid_h,
                                    int grid_w) {
  if (grid_h < 3 || grid_w < 3)
    throw std::invalid_argument("attention_asymmetry: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                " is smaller than 3x3");
  if (attention.empty()) throw std::invalid_argument("attention_asymmetry: no attention maps");
  const std::int64_t heads = attention.front().dim(1);
  AsymmetryReport rep;
  rep.per_head.assign(static_cast<std::size_t>(heads), Grid{});
  // Extended accumulators keep mirror cells equal when their terms match.
  std::vector<std::array<std::array<long double, 3>, 3>> acc_grid(static_cast<std::size_t>(heads));
  double samples = 0;
  for (const auto& a : attention) {
    if (a.rank() != 4 || a.dim(1) != heads || a.dim(2) != a.dim(3) || grid_offset + grid_h * grid_w > a.dim(2))
      throw ad::ShapeError("attention_asymmetry: map " + ad::shape_str(a.shape()) + " does not hold the grid");
    const auto s = a.dim(2);
    const auto v = a.to_vector();
    for (std::int64_t b = 0; b < a.dim(0); ++b)
      for (std::int64_t h = 0; h < heads; ++h) {
        const double* map = v.data() + (b * heads + h) * s * s;
        for (int r = 0; r < grid_h; ++r)
          for (int c = 0; c < grid_w; ++c) {
            const double* row = map + (grid_offset + r * grid_w + c) * s;
            Grid g{};
            double total = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int rr = r + dy, cc = c + dx;
                if (rr < 0 || rr >= grid_h || cc < 0 || cc >= grid_w) continue;
                const double w = row[grid_offset + rr * grid_w + cc];
                g[dy + 1][dx + 1] = w;
                total += w;
              }
            if (total <= 0) continue;
            auto& acc = acc_grid[static_cast<std::size_t>(h)];
            for (int y = 0; y < 3; ++y)
              for (int x = 0; x < 3; ++x) acc[y][x] += g[y][x] / total;
          }
      }
    samples += static_cast<double>(a.dim(0) * grid_h * grid_w);
  }
  for (std::size_t i = 0; i < rep.per_head.size(); ++i)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        auto& g = rep.per_head[i];
        g[y][x] = static_cast<double>(acc_grid[i][y][x] / samples);
        rep.mean_grid[y][x] += g[y][x] / static_cast<double>(heads);
      }
  rep.causal_share = causal_share_of(rep.mean_grid);
  return rep;
}

AsymmetryReport decoder_asymmetry(const tok::TokenizerModel& m, const data::ImageSet& images, int stage,
                                  const std::vector<int>& layers, int chunk) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("decoder_asymmetry: stage must be 1 or 2");
  ad::NoGradGuard guard;
  const int depth = stage == 1 ? m.cfg.decoder_depth : m.cfg.stage2_depth;
  std::vector<Tensor> maps;
  for (std::int64_t b = 0; b < images.count(); b += chunk) {
    const auto n = std::min<std::int64_t>(chunk, images.count() - b);
    auto e = tok::encode(images.range(b, n, m.dtype()), m);
    auto rec = stage == 1 ? tok::decode_stage1(e.quant.quantized, m, true) : tok::decode_stage2(e.quant.quantized, m, true);
    for (int l : layers) {
      const int idx = l < 0 ? depth + l : l;
      if (idx < 0 || idx >= depth) throw std::out_of_range("decoder_asymmetry: layer " + std::to_string(l));
      maps.push_back(rec.attention[static_cast<std::size_t>(idx)]);
    }
  }
  const std::int64_t offset = (stage == 2 ? m.cfg.buffer_count : 0) + m.cfg.prefix();
  return attention_asymmetry(maps, offset, m.cfg.grid_h(), m.cfg.grid_w());
}

std::pair<double, double> first_row_error(const tok::TokenizerModel& m, const data::ImageSet& images, int stage) {
  auto e = tok::reconstruction_error(m, images, stage);
  return {e.first_row, e.rest};
}

std::pair<double, double> first_row_error(const Tensor& target, const Tensor& recon, int patch) {
  auto e = tok::split_error(target, recon, patch);
  return {e.first_row, e.rest};
}

tok::TokConfig ablation_config(const tok::TokConfig& base, char row) {
  tok::TokConfig c = base;
  switch (row) {
    case 'A':
      c.use_prefix = false;
      c.aux_loss = false;
      c.decoder_mask = nn::MaskKind::Bidirectional;
      break;
    case 'B':
      c.use_prefix = false;
      c.aux_loss = false;
      c.decoder_mask = nn::MaskKind::Causal;
      break;
    case 'C':
      c.use_prefix = true;
      c.aux_loss = false;
      c.decoder_mask = nn::MaskKind::Causal;
      break;
    case 'D':
    case 'F':
      c.use_prefix = true;
      c.aux_loss = true;
      c.decoder_mask = nn::MaskKind::Causal;
      break;
    default:
      throw std::invalid_argument(std::string("ablation: unknown row '") + row + "'");
  }
  return c;
}

ar::TokenDataset token_dataset(const tok::TokenizerModel& m, const data::ImageSet& images, int classes) {
  ar::TokenDataset ds;
  ds.seq_len = m.cfg.seq_len();
  ds.vocab = m.cfg.vocab;
  ds.classes = classes;
  ds.tokens = tok::encode_all(m, images);
  ds.labels = images.labels;
  ds.validate();
  return ds;
}

namespace {

std::vector<AblationRow> run_seed(const data::ImageSet& train, const data::ImageSet& eval, const AblationBudget& bud,
                                  std::uint64_t seed, const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& s) {
    if (progress) progress("seed " + std::to_string(seed) + ": " + s);
  };
  std::vector<AblationRow> rows;
  AblationRow f_row;
  for (char label : {'A', 'B', 'C', 'D'}) {
    AblationRow row;
    row.label = std::string(1, label);
    row.seed = seed;
    const auto cfg = ablation_config(bud.tokenizer, label);
    auto m = tok::TokenizerModel::create(cfg, seed);
    auto tc = bud.tok_train;
    tc.stage = 1;
    tc.seed = seed;
    say(row.label + " tokenizer");
    tok::train_tokenizer(m, train, tc);
    auto ds = token_dataset(m, train, bud.ar.classes);
    row.utilization = vq::utilization(cfg.vocab, ds.tokens);
    auto rec = tok::reconstruction_error(m, eval, 1);
    row.recon_mse = rec.total;
    row.first_row_mse = rec.first_row;
    row.rest_mse = rec.rest;
    if (cfg.grid_h() >= 3 && cfg.grid_w() >= 3) row.causal_share = decoder_asymmetry(m, eval, 1).causal_share;

    auto arc = bud.ar;
    arc.vocab = cfg.vocab;
    arc.prefix = cfg.prefix();
    arc.grid_h = cfg.grid_h();
    arc.grid_w = cfg.grid_w();
    auto arm = ar::ARModel::create(arc, seed);
    auto atc = bud.ar_train;
    atc.seed = seed;
    say(row.label + " AR");
    ar::train_ar(arm, ds, atc);
    auto ev = ar::evaluate_ar(arm, ds);
    row.ar_loss = ev.loss;
    row.ar_accuracy = ev.accuracy;
    rows.push_back(row);

    if (label == 'D') {
      // Stage 2 continues from D's tokenizer, so tokens and AR metrics are shared.
      AblationRow f = row;
      f.label = "F";
      auto tc2 = bud.tok_train;
      tc2.stage = 2;
      tc2.seed = seed;
      tc2.steps = bud.stage2_steps > 0 ? bud.stage2_steps : bud.tok_train.steps;
      say("F stage 2");
      const auto before = tok::encode_all(m, eval);
      tok::train_tokenizer(m, train, tc2);
      f.indices_stable = tok::encode_all(m, eval) == before;
      auto rec2 = tok::reconstruction_error(m, eval, 2);
      f.recon_mse = rec2.total;
      f.first_row_mse = rec2.first_row;
      f.rest_mse = rec2.rest;
      if (cfg.grid_h() >= 3 && cfg.grid_w() >= 3) f.causal_share = decoder_asymmetry(m, eval, 2).causal_share;
      f_row = f;
    }
  }
  rows.push_back(f_row);
  return rows;
}

}  // namespace

std::vector<AblationRow> ablation_suite(const data::ImageSet& train, const data::ImageSet& eval,
                                        const AblationBudget& budget,
                                        const std::function<void(const std::string&)>& progress) {
  if (budget.seeds.empty()) throw std::invalid_argument("ablation: no seeds");
  if (budget.tok_train.steps < 1 || budget.ar_train.steps < 1) throw std::invalid_argument("ablation: empty budget");
  std::vector<std::vector<AblationRow>> per_seed(budget.seeds.size());
  const std::size_t threads = static_cast<std::size_t>(std::max(1, budget.threads));
  for (std::size_t start = 0; start < budget.seeds.size(); start += threads) {
    std::vector<std::future<std::vector<AblationRow>>> jobs;
    const auto end = std::min(budget.seeds.size(), start + threads);
    for (std::size_t i = start; i < end; ++i) {
      if (threads == 1) {
        per_seed[i] = run_seed(train, eval, budget, budget.seeds[i], progress);
      } else {
        jobs.push_back(std::async(std::launch::async, run_seed, std::cref(train), std::cref(eval), std::cref(budget),
                                  budget.seeds[i], std::cref(progress)));
      }
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) per_seed[start + j] = jobs[j].get();
  }
  std::vector<AblationRow> out;
  for (auto& rows : per_seed) out.insert(out.end(), rows.begin(), rows.end());
  return out;
}

const char* ablation_header() {
  return "label,seed,ar_loss,ar_accuracy,recon_mse,first_row_mse,rest_mse,utilization,causal_share,indices_stable";
}

std::string ablation_row_csv(const AblationRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%s,%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g,%.9g,%d", r.label.c_str(),
                static_cast<unsigned long long>(r.seed), r.ar_loss, r.ar_accuracy, r.recon_mse, r.first_row_mse,
                r.rest_mse, r.utilization, r.causal_share, r.indices_stable ? 1 : 0);
  return buf;
}

}  // namespace alitok::analysis
