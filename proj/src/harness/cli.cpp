// SPDX-License-Identifier: Apache-2.0
#include "alitok/harness/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

#include "alitok/analysis/analysis.hpp"
#include "alitok/ar/sampler.hpp"
#include "alitok/harness/checkpoint.hpp"
#include "alitok/harness/config.hpp"
#include "alitok/harness/files.hpp"

namespace alitok::harness {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string run_dir;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration (defaults to the built-in desk preset)");
  sub->add_option("--seed", c.seed, "Seed for initialisation, training and sampling (overrides the config)");
  sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  sub->add_option("--run-dir", c.run_dir, "Directory holding datasets and checkpoints (defaults to --out)");
}

struct Run {
  RunConfig cfg;
  fs::path out, dir;

  explicit Run(const Common& c) {
    cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    out = c.out;
    dir = c.run_dir.empty() ? out : fs::path(c.run_dir);
  }
  std::string in(const char* name) const { return (dir / name).string(); }
  std::string to(const std::string& name) const { return (out / name).string(); }
  std::string need(const char* name, const char* producer) const {
    auto p = in(name);
    if (!fs::exists(p)) throw std::runtime_error(p + " not found; run '" + producer + "' first");
    return p;
  }
  /// Latest tokenizer checkpoint and its stage.
  std::pair<tok::TokenizerModel, int> tokenizer(int stage = 0) const {
    if (stage == 0) stage = fs::exists(in("tok_stage2.altk")) ? 2 : 1;
    const auto name = stage == 2 ? "tok_stage2.altk" : "tok_stage1.altk";
    const auto producer = stage == 2 ? "train-tok --stage 2" : "train-tok --stage 1";
    return {load_tokenizer(need(name, producer)), stage};
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void gen_data(const Run& r, std::ostream& out) {
  const auto train = data::gen_dataset(r.cfg.data);
  const auto eval = data::gen_dataset(r.cfg.eval_spec());
  save_images(train, r.to("train.alim"));
  save_images(eval, r.to("eval.alim"));
  for (int c = 0; c < r.cfg.data.classes; ++c)
    write_ppm(data::gen_image(r.cfg.data, c, 0), r.cfg.data.image_h, r.cfg.data.image_w,
              r.to("preview_class" + std::to_string(c) + ".ppm"));
  out << "gen-data: " << train.count() << " train and " << eval.count() << " eval images\n";
}

void train_tok(const Run& r, int stage, std::ostream& out, std::ostream& err) {
  const auto images = load_images(r.need("train.alim", "gen-data"));
  tok::TokenizerModel m =
      stage == 1 ? tok::TokenizerModel::create(r.cfg.tokenizer, r.cfg.seed)
                 : load_tokenizer(r.need("tok_stage1.altk", "train-tok --stage 1"));
  if (images.height != m.cfg.image_h || images.width != m.cfg.image_w)
    throw std::runtime_error("train-tok: image size does not match the tokenizer");
  const auto tc = r.cfg.tok_train_config(stage);
  std::string csv = std::string(tok::metrics_header()) + "\n";
  const long every = std::max<long>(1, tc.steps / 10);
  tok::train_tokenizer(m, images, tc, [&](const tok::TokMetrics& row) {
    csv += tok::metrics_row(row) + "\n";
    if ((row.step + 1) % every == 0) err << "stage " << stage << " step " << row.step + 1 << " loss " << row.total << "\n";
  });
  const std::string base = "tok_stage" + std::to_string(stage);
  save_tokenizer(m, r.to(base + ".altk"));
  atomic_write(r.to(base + "_metrics.csv"), csv);
  out << "train-tok: wrote " << r.to(base + ".altk") << "\n";
}

ar::TokenDataset token_cache(const Run& r, std::ostream& err) {
  const auto path = r.in("tokens.bin");
  const auto arc = r.cfg.ar_config();
  if (fs::exists(path)) {
    auto ds = load_tokens(path);
    if (ds.seq_len != arc.seq_len() || ds.vocab != arc.vocab || ds.classes != arc.classes)
      throw std::runtime_error(path + " does not match the configuration; delete it to re-encode");
    return ds;
  }
  auto [m, stage] = r.tokenizer();
  err << "encoding the training set with the stage-" << stage << " tokenizer\n";
  auto ds = analysis::token_dataset(m, load_images(r.need("train.alim", "gen-data")), arc.classes);
  save_tokens(ds, path);
  return ds;
}

void train_ar_cmd(const Run& r, std::ostream& out, std::ostream& err) {
  const auto ds = token_cache(r, err);
  auto m = ar::ARModel::create(r.cfg.ar_config(), r.cfg.seed);
  const auto tc = r.cfg.ar_train_config();
  std::string csv = std::string(ar::metrics_header()) + "\n";
  const long every = std::max<long>(1, tc.steps / 10);
  ar::train_ar(m, ds, tc, [&](const ar::ARMetrics& row) {
    csv += ar::metrics_row(row) + "\n";
    if ((row.step + 1) % every == 0) err << "ar step " << row.step + 1 << " loss " << row.loss << "\n";
  });
  save_ar(m, r.to("ar.altk"));
  atomic_write(r.to("ar_metrics.csv"), csv);
  out << "train-ar: wrote " << r.to("ar.altk") << "\n";
}

struct SampleFlags {
  int cls = 0;
  int n = 1;
  std::optional<double> temperature, cfg_scale, scaler_power;
  bool no_cache = false;
};

void sample(const Run& r, const SampleFlags& f, std::ostream& out) {
  auto sc = r.cfg.sampling;
  if (f.temperature) sc.temperature = *f.temperature;
  if (f.cfg_scale) {
    sc.use_cfg = true;
    sc.guidance = *f.cfg_scale;
  }
  if (f.scaler_power) sc.scaler_power = *f.scaler_power;
  if (f.no_cache) sc.use_cache = false;
  try {
    sc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.n < 1) throw UsageError("sample: --n must be positive");
  const auto m = load_ar(r.need("ar.altk", "train-ar"));
  if (f.cls < 0 || f.cls >= m.cfg.classes)
    throw UsageError("sample: --class must lie in [0, " + std::to_string(m.cfg.classes) + ")");
  auto [t, stage] = r.tokenizer();
  if (t.cfg.vocab != m.cfg.vocab || t.cfg.seq_len() != m.cfg.seq_len())
    throw std::runtime_error("sample: tokenizer and AR checkpoints disagree");
  const std::vector<int> classes(static_cast<std::size_t>(f.n), f.cls);
  const auto tokens = ar::generate(m, classes, sc, r.cfg.seed);
  ad::NoGradGuard guard;
  const auto codes = tok::codes_for(tokens, f.n, t);
  const auto rec = stage == 2 ? tok::decode_stage2(codes, t) : tok::decode_stage1(codes, t);
  const auto px = rec.image.to_vector();
  const auto size = static_cast<std::size_t>(t.cfg.image_h * t.cfg.image_w * 3);
  for (int i = 0; i < f.n; ++i) {
    std::vector<float> img(px.begin() + static_cast<std::ptrdiff_t>(i * size),
                           px.begin() + static_cast<std::ptrdiff_t>((i + 1) * size));
    char name[96];
    std::snprintf(name, sizeof name, "class%d_seed%llu_%03d.ppm", f.cls, static_cast<unsigned long long>(r.cfg.seed), i);
    write_ppm(img, t.cfg.image_h, t.cfg.image_w, r.to(name));
  }
  out << "sample: wrote " << f.n << " images to " << r.out.string() << "\n";
}

void eval_recon(const Run& r, std::ostream& out) {
  const auto eval = load_images(r.need("eval.alim", "gen-data"));
  std::string csv = "stage,mse,first_row_mse,rest_mse\n";
  for (int stage : {1, 2}) {
    if (stage == 2 && !fs::exists(r.in("tok_stage2.altk"))) continue;
    auto [m, s] = r.tokenizer(stage);
    // The stage-2 checkpoint carries both decoders.
    const auto e = tok::reconstruction_error(m, eval, s);
    csv += std::to_string(s) + "," + fmt("%.9g", e.total) + "," + fmt("%.9g", e.first_row) + "," + fmt("%.9g", e.rest) + "\n";
  }
  atomic_write(r.to("recon.csv"), csv);
  out << csv;
}

void eval_acc(const Run& r, std::ostream& out) {
  const auto m = load_ar(r.need("ar.altk", "train-ar"));
  const auto ds = load_tokens(r.need("tokens.bin", "train-ar"));
  const auto e = ar::evaluate_ar(m, ds);
  const std::string csv = "loss,accuracy\n" + fmt("%.9g", e.loss) + "," + fmt("%.9g", e.accuracy) + "\n";
  atomic_write(r.to("acc.csv"), csv);
  out << csv;
}

void attn_stats(const Run& r, int stage, std::ostream& out) {
  const auto eval = load_images(r.need("eval.alim", "gen-data"));
  auto [m, s] = r.tokenizer(stage);
  const auto rep = analysis::decoder_asymmetry(m, eval, s, r.cfg.attention_layers);
  static const char* names[3][3] = {{"up_left", "up", "up_right"}, {"left", "self", "right"},
                                    {"down_left", "down", "down_right"}};
  std::string csv = "quantity,value\n";
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) csv += std::string(names[y][x]) + "," + fmt("%.9g", rep.mean_grid[y][x]) + "\n";
  csv += "causal_share," + fmt("%.9g", rep.causal_share) + "\n";
  atomic_write(r.to("attn_stage" + std::to_string(s) + ".csv"), csv);
  out << csv;
}

void ablate(const Run& r, std::ostream& out, std::ostream& err) {
  const auto train = load_images(r.need("train.alim", "gen-data"));
  const auto eval = load_images(r.need("eval.alim", "gen-data"));
  const auto rows = analysis::ablation_suite(train, eval, r.cfg.ablation_budget(threads_from_env()),
                                             [&](const std::string& s) { err << s << "\n"; });
  std::string csv = std::string(analysis::ablation_header()) + "\n";
  for (const auto& row : rows) csv += analysis::ablation_row_csv(row) + "\n";
  atomic_write(r.to("ablation.csv"), csv);
  out << csv;
}

void bench(const Run& r, int batch, std::ostream& out) {
  if (batch < 1) throw UsageError("bench-cache: --batch must be positive");
  const auto path = r.in("ar.altk");
  const auto m = fs::exists(path) ? load_ar(path) : ar::ARModel::create(r.cfg.ar_config(), r.cfg.seed);
  const auto b = ar::bench_cache(m, batch, r.cfg.sampling, r.cfg.seed);
  const std::string csv = "seq_len,batch,cached_s,uncached_s,speedup\n" + std::to_string(b.seq_len) + "," +
                          std::to_string(b.batch) + "," + fmt("%.6f", b.cached_s) + "," + fmt("%.6f", b.uncached_s) +
                          "," + fmt("%.3f", b.speedup) + "\n";
  atomic_write(r.to("bench.csv"), csv);
  out << csv;
  if (!b.identical) throw std::runtime_error("bench-cache: cached and uncached samples differ");
}

void export_codebook(const Run& r, int stage, std::ostream& out) {
  auto [m, s] = r.tokenizer(stage);
  std::string csv = "index,usage";
  for (int k = 0; k < m.cfg.code_dim; ++k) csv += ",v" + std::to_string(k);
  csv += "\n";
  const auto v = m.codebook.vectors.to_vector();
  for (int i = 0; i < m.cfg.vocab; ++i) {
    csv += std::to_string(i) + "," + fmt("%.9g", m.codebook.usage_ema[static_cast<std::size_t>(i)]);
    for (int k = 0; k < m.cfg.code_dim; ++k) csv += "," + fmt("%.9g", v[static_cast<std::size_t>(i * m.cfg.code_dim + k)]);
    csv += "\n";
  }
  atomic_write(r.to("codebook.csv"), csv);
  out << "export-codebook: wrote " << r.to("codebook.csv") << " from stage " << s << "\n";
}

}  // namespace

int threads_from_env() {
  const char* v = std::getenv("ALITOK_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw std::invalid_argument(std::string("ALITOK_THREADS: invalid value '") + v + "'");
  return static_cast<int>(n);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image tokenizer and autoregressive generator toolkit", "alitok"};
  app.require_subcommand(1);
  Common common;
  int stage = 1;
  int view_stage = 0;
  int batch = 8;
  SampleFlags sf;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic train/eval image sets and class previews");
  auto* tt = app.add_subcommand("train-tok", "Train the tokenizer (stage 1 from scratch, stage 2 from a stage-1 checkpoint)");
  tt->add_option("--stage", stage, "Training stage")->check(CLI::IsMember({1, 2}))->capture_default_str();
  auto* ta = app.add_subcommand("train-ar", "Train the AR model; encodes and caches tokens.bin when absent");
  auto* sm = app.add_subcommand("sample", "Generate class-conditional images as PPM files");
  sm->add_option("--class", sf.cls, "Class id")->capture_default_str();
  sm->add_option("--n", sf.n, "Number of images")->capture_default_str();
  sm->add_option("--temperature", sf.temperature, "Sampling temperature (config default 0.95)");
  sm->add_option("--cfg-scale", sf.cfg_scale, "Enable classifier-free guidance with this final scale");
  sm->add_option("--scaler-power", sf.scaler_power, "Exponent of the guidance schedule");
  sm->add_flag("--no-kv-cache", sf.no_cache, "Recompute the full prefix at every step");
  auto* er = app.add_subcommand("eval-recon", "Reconstruction MSE on the eval set (whole, first row, rest)");
  auto* ea = app.add_subcommand("eval-acc", "Teacher-forced AR loss and accuracy on the cached tokens");
  auto* at = app.add_subcommand("attn-stats", "Mean 3x3 decoder attention and causal share on the eval set");
  auto* ab = app.add_subcommand("ablate", "Train and score ablation rows A, B, C, D, F for every configured seed");
  auto* bc = app.add_subcommand("bench-cache", "Time sampling with and without the KV cache");
  bc->add_option("--batch", batch, "Samples per run")->capture_default_str();
  auto* ex = app.add_subcommand("export-codebook", "Write codebook vectors and usage as CSV");
  for (auto* s : {at, ex})
    s->add_option("--stage", view_stage, "Tokenizer stage to read (0 = latest available)")
        ->check(CLI::IsMember({0, 1, 2}))
        ->capture_default_str();
  for (auto* s : {gen, tt, ta, sm, er, ea, at, ab, bc, ex}) add_common(s, common);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand help requests surface as CallForHelp from the subcommand.
    if (e.get_exit_code() == 0) {
      for (auto* s : app.get_subcommands()) out << s->help();
      if (app.get_subcommands().empty()) out << app.help();
      return kExitOk;
    }
    err << "alitok: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    const Run r(common);
    if (gen->parsed()) gen_data(r, out);
    else if (tt->parsed()) train_tok(r, stage, out, err);
    else if (ta->parsed()) train_ar_cmd(r, out, err);
    else if (sm->parsed()) sample(r, sf, out);
    else if (er->parsed()) eval_recon(r, out);
    else if (ea->parsed()) eval_acc(r, out);
    else if (at->parsed()) attn_stats(r, view_stage, out);
    else if (ab->parsed()) ablate(r, out, err);
    else if (bc->parsed()) bench(r, batch, out);
    else if (ex->parsed()) export_codebook(r, view_stage, out);
  } catch (const ConfigError& e) {
    err << "alitok: invalid configuration: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "alitok: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "alitok: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace alitok::harness
