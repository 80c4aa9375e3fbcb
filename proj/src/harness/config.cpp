// SPDX-License-Identifier: Apache-2.0
#include "alitok/harness/config.hpp"

#include <json.hpp>
#include <set>
#include <type_traits>

#include "alitok/harness/files.hpp"

namespace alitok::harness {

using json = nlohmann::ordered_json;

namespace {

/// Strict view of one JSON object: typed reads, unknown keys rejected by finish().
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    const json& v = j_.at(key);
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
    return true;
  }

  template <class T>
  bool get_list(const char* key, std::vector<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(path_ + "." + key + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      json wrap = json::object();
      wrap["v"] = v[i];
      T x{};
      Obj(wrap, path_ + "." + key + "[" + std::to_string(i) + "]").get("v", x);
      out.push_back(x);
    }
    return true;
  }

  /// Sub-object or null when absent.
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const OptimizerConfig& o) {
  return {{"base_lr", o.base_lr}, {"min_lr", o.min_lr},       {"warmup_fraction", o.warmup_fraction},
          {"beta1", o.beta1},     {"beta2", o.beta2},         {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"clip_norm", o.clip_norm}};
}
void read(const json& j, const std::string& path, OptimizerConfig& o) {
  Obj r(j, path);
  r.get("base_lr", o.base_lr);
  r.get("min_lr", o.min_lr);
  r.get("warmup_fraction", o.warmup_fraction);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("eps", o.eps);
  r.get("weight_decay", o.weight_decay);
  r.get("clip_norm", o.clip_norm);
  r.finish();
}

json to_json(const nn::BlockConfig& b) {
  return {{"width", b.width}, {"heads", b.heads}, {"mlp_ratio", b.mlp_ratio}, {"qk_norm", b.qk_norm}, {"eps", b.eps}};
}
void read(const json& j, const std::string& path, nn::BlockConfig& b) {
  Obj r(j, path);
  r.get("width", b.width);
  r.get("heads", b.heads);
  r.get("mlp_ratio", b.mlp_ratio);
  r.get("qk_norm", b.qk_norm);
  r.get("eps", b.eps);
  r.finish();
}

nn::MaskKind parse_mask(const std::string& s, const std::string& where) {
  if (s == "causal") return nn::MaskKind::Causal;
  if (s == "bidirectional") return nn::MaskKind::Bidirectional;
  throw ConfigError(where + ": expected \"causal\" or \"bidirectional\", got \"" + s + "\"");
}

json to_json(const tok::TokConfig& c) {
  return {{"image_h", c.image_h},
          {"image_w", c.image_w},
          {"patch", c.patch},
          {"use_prefix", c.use_prefix},
          {"aux_loss", c.aux_loss},
          {"vocab", c.vocab},
          {"code_dim", c.code_dim},
          {"encoder", to_json(c.encoder)},
          {"encoder_depth", c.encoder_depth},
          {"decoder", to_json(c.decoder)},
          {"decoder_depth", c.decoder_depth},
          {"decoder_mask", c.decoder_mask == nn::MaskKind::Causal ? "causal" : "bidirectional"},
          {"stage2_depth", c.stage2_depth},
          {"buffer_count", c.buffer_count},
          {"beta", c.beta},
          {"lambda_adv", c.lambda_adv},
          {"feature_seed", c.feature_seed},
          {"usage_decay", c.usage_decay},
          {"dead_fraction", c.dead_fraction},
          {"reinit", c.reinit},
          {"init_std", c.init_std}};
}
void read(const json& j, const std::string& path, tok::TokConfig& c) {
  Obj r(j, path);
  r.get("image_h", c.image_h);
  r.get("image_w", c.image_w);
  r.get("patch", c.patch);
  r.get("use_prefix", c.use_prefix);
  r.get("aux_loss", c.aux_loss);
  r.get("vocab", c.vocab);
  r.get("code_dim", c.code_dim);
  if (auto* s = r.sub("encoder")) read(*s, r.path("encoder"), c.encoder);
  r.get("encoder_depth", c.encoder_depth);
  if (auto* s = r.sub("decoder")) read(*s, r.path("decoder"), c.decoder);
  r.get("decoder_depth", c.decoder_depth);
  std::string mask;
  if (r.get("decoder_mask", mask)) c.decoder_mask = parse_mask(mask, r.path("decoder_mask"));
  r.get("stage2_depth", c.stage2_depth);
  r.get("buffer_count", c.buffer_count);
  r.get("beta", c.beta);
  r.get("lambda_adv", c.lambda_adv);
  r.get("feature_seed", c.feature_seed);
  r.get("usage_decay", c.usage_decay);
  r.get("dead_fraction", c.dead_fraction);
  r.get("reinit", c.reinit);
  r.get("init_std", c.init_std);
  // Optional explicit prefix count; it must equal the derived one.
  int prefix = 0;
  if (r.get("prefix", prefix) && c.patch > 0 && prefix != c.prefix())
    throw ConfigError(r.path("prefix") + ": prefix count " + std::to_string(prefix) + " must equal the grid width " +
                      std::to_string(c.prefix()));
  r.finish();
}

json to_json(const ar::ARConfig& c) {
  return {{"vocab", c.vocab},   {"classes", c.classes}, {"prefix", c.prefix},
          {"grid_h", c.grid_h}, {"grid_w", c.grid_w},   {"block", to_json(c.block)},
          {"depth", c.depth},   {"drop_prob", c.drop_prob}, {"init_std", c.init_std}};
}
void read(const json& j, const std::string& path, ar::ARConfig& c) {
  Obj r(j, path);
  r.get("vocab", c.vocab);
  r.get("classes", c.classes);
  r.get("prefix", c.prefix);
  r.get("grid_h", c.grid_h);
  r.get("grid_w", c.grid_w);
  if (auto* s = r.sub("block")) read(*s, r.path("block"), c.block);
  r.get("depth", c.depth);
  r.get("drop_prob", c.drop_prob);
  r.get("init_std", c.init_std);
  r.finish();
}

json to_json(const data::SyntheticSpec& s) {
  return {{"classes", s.classes}, {"images_per_class", s.images_per_class}, {"image_h", s.image_h},
          {"image_w", s.image_w}, {"noise_amplitude", s.noise_amplitude},   {"seed", s.seed}};
}

json to_json(const StageTrain& t) { return {{"steps", t.steps}, {"batch", t.batch}, {"optim", to_json(t.optim)}}; }
void read(const json& j, const std::string& path, StageTrain& t) {
  Obj r(j, path);
  r.get("steps", t.steps);
  r.get("batch", t.batch);
  if (auto* s = r.sub("optim")) read(*s, r.path("optim"), t.optim);
  r.finish();
}

json to_json(const ar::SamplingConfig& s) {
  return {{"temperature", s.temperature}, {"use_cfg", s.use_cfg},     {"guidance", s.guidance},
          {"scaler_power", s.scaler_power}, {"use_cache", s.use_cache}};
}

template <class F>
void check(const std::string& section, F&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
}

}  // namespace

data::SyntheticSpec RunConfig::eval_spec() const {
  auto s = data;
  s.images_per_class = eval_images_per_class;
  s.seed = eval_seed;
  return s;
}

ar::ARConfig RunConfig::ar_config() const {
  auto c = ar;
  c.vocab = tokenizer.vocab;
  c.classes = data.classes;
  c.prefix = tokenizer.prefix();
  c.grid_h = tokenizer.grid_h();
  c.grid_w = tokenizer.grid_w();
  return c;
}

tok::TrainConfig RunConfig::tok_train_config(int stage) const {
  const auto& t = stage == 2 ? stage2_train : tok_train;
  return {stage, t.steps, t.batch, seed, t.optim};
}

ar::ARTrainConfig RunConfig::ar_train_config() const { return {ar_train.steps, ar_train.batch, seed, ar_train.optim}; }

analysis::AblationBudget RunConfig::ablation_budget(int threads) const {
  analysis::AblationBudget b;
  b.tokenizer = tokenizer;
  b.tok_train = tok_train_config(1);
  b.tok_train.steps = ablation.tok_steps;
  b.stage2_steps = ablation.stage2_steps;
  b.ar = ar_config();
  b.ar_train = ar_train_config();
  b.ar_train.steps = ablation.ar_steps;
  b.seeds = ablation.seeds;
  b.threads = threads;
  return b;
}

void RunConfig::validate() const {
  if (version != kConfigVersion)
    throw ConfigError("config: version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kConfigVersion) + ")");
  check("data", [&] { data.validate(); });
  check("eval", [&] { eval_spec().validate(); });
  check("tokenizer", [&] { tokenizer.validate(); });
  if (tokenizer.image_h != data.image_h || tokenizer.image_w != data.image_w)
    throw ConfigError("tokenizer: image size must match the data section");
  if (tokenizer.vocab > 65536) throw ConfigError("tokenizer: vocab must fit in u16 token files");
  if (ar.vocab != tokenizer.vocab || ar.prefix != tokenizer.prefix() || ar.grid_h != tokenizer.grid_h() ||
      ar.grid_w != tokenizer.grid_w() || ar.classes != data.classes)
    throw ConfigError("ar: vocab, classes, prefix and grid must match the tokenizer and data sections (vocab " +
                      std::to_string(tokenizer.vocab) + ", classes " + std::to_string(data.classes) + ", prefix " +
                      std::to_string(tokenizer.prefix()) + ", grid " + std::to_string(tokenizer.grid_h()) + "x" +
                      std::to_string(tokenizer.grid_w()) + ")");
  check("ar", [&] { ar_config().validate(); });
  check("sampling", [&] { sampling.validate(); });
  for (const auto* t : {&tok_train, &stage2_train, &ar_train}) {
    if (t->steps < 1 || t->batch < 1) throw ConfigError("training: steps and batch must be positive");
    if (!(t->optim.base_lr > 0) || t->optim.min_lr < 0 || t->optim.warmup_fraction < 0 || t->optim.warmup_fraction >= 1)
      throw ConfigError("training: invalid optimizer settings");
  }
  if (ablation.tok_steps < 1 || ablation.stage2_steps < 1 || ablation.ar_steps < 1 || ablation.seeds.empty())
    throw ConfigError("ablation: steps must be positive and seeds non-empty");
  if (attention_layers.empty()) throw ConfigError("attention_layers: must not be empty");
  for (int l : attention_layers) {
    const int depth = std::min(tokenizer.decoder_depth, tokenizer.stage2_depth);
    if (l >= depth || l < -depth) throw ConfigError("attention_layers: layer " + std::to_string(l) + " out of range");
  }
}

RunConfig parse_config(const std::string& text) {
  const json j = parse_json(text);
  RunConfig c;
  Obj r(j, "config");
  if (!r.get("version", c.version)) throw ConfigError("config: missing 'version'");
  if (c.version != kConfigVersion)
    throw ConfigError("config: version " + std::to_string(c.version) + " is not supported");
  r.get("seed", c.seed);
  if (auto* s = r.sub("data")) {
    Obj d(*s, "data");
    d.get("classes", c.data.classes);
    d.get("images_per_class", c.data.images_per_class);
    d.get("image_h", c.data.image_h);
    d.get("image_w", c.data.image_w);
    d.get("noise_amplitude", c.data.noise_amplitude);
    d.get("seed", c.data.seed);
    d.finish();
  }
  if (auto* s = r.sub("eval")) {
    Obj e(*s, "eval");
    e.get("images_per_class", c.eval_images_per_class);
    e.get("seed", c.eval_seed);
    e.finish();
  }
  if (auto* s = r.sub("tokenizer")) read(*s, "tokenizer", c.tokenizer);
  if (auto* s = r.sub("tok_train")) read(*s, "tok_train", c.tok_train);
  if (auto* s = r.sub("stage2_train")) read(*s, "stage2_train", c.stage2_train);
  // Derived AR fields may be spelled out, but then they must agree.
  c.ar = c.ar_config();
  if (auto* s = r.sub("ar")) read(*s, "ar", c.ar);
  if (auto* s = r.sub("ar_train")) read(*s, "ar_train", c.ar_train);
  if (auto* s = r.sub("sampling")) {
    Obj sm(*s, "sampling");
    sm.get("temperature", c.sampling.temperature);
    sm.get("use_cfg", c.sampling.use_cfg);
    sm.get("guidance", c.sampling.guidance);
    sm.get("scaler_power", c.sampling.scaler_power);
    sm.get("use_cache", c.sampling.use_cache);
    sm.finish();
  }
  if (auto* s = r.sub("ablation")) {
    Obj a(*s, "ablation");
    a.get("tok_steps", c.ablation.tok_steps);
    a.get("stage2_steps", c.ablation.stage2_steps);
    a.get("ar_steps", c.ablation.ar_steps);
    a.get_list("seeds", c.ablation.seeds);
    a.finish();
  }
  r.get_list("attention_layers", c.attention_layers);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

std::string dump_config(const RunConfig& c) {
  json j = {{"version", c.version},
            {"seed", c.seed},
            {"data", to_json(c.data)},
            {"eval", {{"images_per_class", c.eval_images_per_class}, {"seed", c.eval_seed}}},
            {"tokenizer", to_json(c.tokenizer)},
            {"tok_train", to_json(c.tok_train)},
            {"stage2_train", to_json(c.stage2_train)},
            {"ar", to_json(c.ar)},
            {"ar_train", to_json(c.ar_train)},
            {"sampling", to_json(c.sampling)},
            {"ablation",
             {{"tok_steps", c.ablation.tok_steps},
              {"stage2_steps", c.ablation.stage2_steps},
              {"ar_steps", c.ablation.ar_steps},
              {"seeds", c.ablation.seeds}}},
            {"attention_layers", c.attention_layers}};
  return j.dump(2) + "\n";
}

std::string tok_config_json(const tok::TokConfig& c) { return to_json(c).dump(); }

tok::TokConfig parse_tok_config(const std::string& text) {
  tok::TokConfig c;
  read(parse_json(text), "tokenizer", c);
  check("tokenizer", [&] { c.validate(); });
  return c;
}

std::string ar_config_json(const ar::ARConfig& c) { return to_json(c).dump(); }

ar::ARConfig parse_ar_config(const std::string& text) {
  ar::ARConfig c;
  read(parse_json(text), "ar", c);
  check("ar", [&] { c.validate(); });
  return c;
}

}  // namespace alitok::harness
