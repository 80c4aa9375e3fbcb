// SPDX-License-Identifier: Apache-2.0
#include "alitok/harness/checkpoint.hpp"

#include <bit>
#include <json.hpp>

#include "alitok/harness/config.hpp"
#include "alitok/harness/files.hpp"
#include "le.hpp"

namespace alitok::harness {

namespace {

constexpr std::string_view kMagic = "ALTK";
constexpr std::uint32_t kMaxRank = 8;
using CReader = BasicReader<CorruptCheckpointError>;

void write_payload(Writer& w, const ad::Buffer& b) {
  if (b.dtype() == ad::DType::F32)
    for (float v : b.as<float>()) w.u32(std::bit_cast<std::uint32_t>(v));
  else
    for (double v : b.as<double>()) w.u64(std::bit_cast<std::uint64_t>(v));
}

ad::Buffer read_payload(CReader& r, ad::DType dt, std::size_t n) {
  if (n > r.remaining()) throw CorruptCheckpointError("checkpoint: truncated");
  ad::Buffer b(dt, n);
  if (dt == ad::DType::F32)
    for (auto& v : b.as<float>()) v = std::bit_cast<float>(r.u32());
  else
    for (auto& v : b.as<double>()) v = std::bit_cast<double>(r.u64());
  return b;
}

std::string wrap_config(const char* kind, const std::string& model_json) {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["model"] = nlohmann::ordered_json::parse(model_json);
  return j.dump();
}

/// Model JSON of a checkpoint of the given kind.
std::string unwrap_config(const Checkpoint& c, const char* kind) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.config);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(std::string("checkpoint: malformed config: ") + e.what());
  }
  if (!j.is_object() || !j.contains("kind") || !j.contains("model"))
    throw CorruptCheckpointError("checkpoint: config lacks kind/model");
  if (j["kind"] != kind)
    throw ShapeMismatchError("checkpoint: holds a '" + j["kind"].dump() + "' model, expected '" + kind + "'");
  return j["model"].dump();
}

/// Copies stored tensors into freshly built parameters, checking name, dtype and shape.
void restore(ParamStore& params, const std::vector<std::pair<std::string, ad::Tensor>>& stored, std::size_t extra) {
  if (stored.size() != params.size() + extra)
    throw ShapeMismatchError("checkpoint: " + std::to_string(stored.size()) + " tensors, configuration needs " +
                             std::to_string(params.size() + extra));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, want] = params.entries()[i];
    const auto& [sname, got] = stored[i];
    if (sname != name) throw ShapeMismatchError("checkpoint: tensor " + std::to_string(i) + " is '" + sname + "', expected '" + name + "'");
    if (got.shape() != want.shape() || got.dtype() != want.dtype())
      throw ShapeMismatchError("checkpoint: '" + name + "' is " + ad::shape_str(got.shape()) + ", configuration needs " +
                               ad::shape_str(want.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor p = params.entries()[i].second;
    p.data() = stored[i].second.data();
  }
}

ad::DType stored_dtype(const Checkpoint& c) {
  if (c.tensors.empty()) throw ShapeMismatchError("checkpoint: no tensors");
  return c.tensors.front().second.dtype();
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.config.size()));
  w.bytes(c.config);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.u8(t.dtype() == ad::DType::F32 ? 0 : 1);
    write_payload(w, t.data());
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  CReader r(bytes, "checkpoint");
  if (bytes.size() < kMagic.size() || r.bytes(kMagic.size()) != kMagic)
    throw CorruptCheckpointError("checkpoint: bad magic (not an ALTK file)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint: format version " + std::to_string(version) + ", this build reads " +
                               std::to_string(kCheckpointVersion));
  Checkpoint c;
  const auto clen = r.u32();
  c.config = std::string(r.bytes(clen));
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.u32();
    std::string name(r.bytes(nlen));
    const auto rank = r.u32();
    if (rank > kMaxRank) throw CorruptCheckpointError("checkpoint: rank " + std::to_string(rank) + " for '" + name + "'");
    ad::Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u32());
      n *= static_cast<std::size_t>(shape.back());
    }
    const auto code = r.u8();
    if (code > 1) throw CorruptCheckpointError("checkpoint: unknown dtype code " + std::to_string(code));
    const auto dt = code == 0 ? ad::DType::F32 : ad::DType::F64;
    auto buf = read_payload(r, dt, n);
    ad::Tensor t = ad::Tensor::zeros(shape, dt);
    t.data() = std::move(buf);
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw CorruptCheckpointError("checkpoint: trailing bytes");
  return c;
}

void save_tokenizer(const tok::TokenizerModel& m, const std::string& path) {
  Checkpoint c{wrap_config("tokenizer", tok_config_json(m.cfg)), m.params.entries()};
  c.tensors.emplace_back("codebook.usage", ad::Tensor::from({m.cfg.vocab}, m.codebook.usage_ema, ad::DType::F64));
  atomic_write(path, encode_checkpoint(c));
}

tok::TokenizerModel load_tokenizer(const std::string& path) {
  const auto c = decode_checkpoint(read_file(path));
  tok::TokConfig cfg;
  try {
    cfg = parse_tok_config(unwrap_config(c, "tokenizer"));
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("checkpoint: ") + e.what());
  }
  auto m = tok::TokenizerModel::create(cfg, 0, stored_dtype(c));
  restore(m.params, c.tensors, 1);
  const auto& usage = c.tensors.back();
  if (usage.first != "codebook.usage" || usage.second.shape() != ad::Shape{cfg.vocab})
    throw ShapeMismatchError("checkpoint: missing codebook usage");
  m.codebook.usage_ema = usage.second.to_vector();
  return m;
}

void save_ar(const ar::ARModel& m, const std::string& path) {
  atomic_write(path, encode_checkpoint({wrap_config("ar", ar_config_json(m.cfg)), m.params.entries()}));
}

ar::ARModel load_ar(const std::string& path) {
  const auto c = decode_checkpoint(read_file(path));
  ar::ARConfig cfg;
  try {
    cfg = parse_ar_config(unwrap_config(c, "ar"));
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("checkpoint: ") + e.what());
  }
  auto m = ar::ARModel::create(cfg, 0, stored_dtype(c));
  restore(m.params, c.tensors, 0);
  return m;
}

}  // namespace alitok::harness
