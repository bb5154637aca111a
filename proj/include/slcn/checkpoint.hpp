#pragma once

// Checkpoint container and its binary file format.
//
// Layout, all integers little-endian:
//   "SLCN" | u16 version (=1) | u32 config length | config JSON (UTF-8)
//   | u32 tensor count | tensor records
// Tensor record:
//   u16 name length | name | u8 rank | u32 dims[rank] | float32 payload
//
// Tensor payloads are always float32; a double model is narrowed on save.
// Decoding validates every length against the remaining bytes before any
// allocation, so a corrupt file is rejected whole.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slcn/config_io.hpp"
#include "slcn/model.hpp"

namespace slcn {

struct CheckpointMeta {
  std::int64_t epoch = 0;
  double best_metric = 0.0;
  std::string metric_name;
  std::vector<std::string> labels;  // class names, in score order
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<TensorRecord> tensors;
};

template <class T>
Checkpoint checkpoint_from_model(Model<T>& model, CheckpointMeta meta = {}) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.meta = std::move(meta);
  for (auto& [name, tensor] : model.named_tensors()) {
    TensorRecord rec;
    rec.name = name;
    rec.shape = tensor.shape();
    rec.values.reserve(tensor.data().size());
    for (T v : tensor.data()) rec.values.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(rec));
  }
  return ckpt;
}

template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<T> model = build_model<T>(ckpt.config, 0);
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& rec : ckpt.tensors) {
    if (!by_name.emplace(rec.name, &rec).second)
      throw Error("checkpoint: duplicate tensor '" + rec.name + "'");
  }
  auto named = model.named_tensors();
  if (named.size() != ckpt.tensors.size()) {
    for (const auto& rec : ckpt.tensors) {
      bool found = false;
      for (auto& [name, t] : named)
        if (name == rec.name) found = true;
      if (!found) throw Error("checkpoint: unexpected tensor '" + rec.name + "'");
    }
  }
  for (auto& [name, tensor] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: missing tensor '" + name + "'");
    const TensorRecord& rec = *it->second;
    if (rec.shape != tensor.shape())
      throw Error("checkpoint: tensor '" + name + "' shape " + shape_str(rec.shape) +
                  " does not match config " + shape_str(tensor.shape()));
    auto& dst = tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Wire format

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw Error("checkpoint: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                      (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                      (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                      (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  float f32() {
    std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["model"] = model_config_to_json(ckpt.config);
  j["meta"] = {{"epoch", ckpt.meta.epoch},
               {"best_metric", ckpt.meta.best_metric},
               {"metric", ckpt.meta.metric_name},
               {"labels", ckpt.meta.labels}};
  std::string config_json = j.dump();

  std::vector<std::uint8_t> out;
  out.push_back('S');
  out.push_back('L');
  out.push_back('C');
  out.push_back('N');
  detail::put_u16(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out.insert(out.end(), config_json.begin(), config_json.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& rec : ckpt.tensors) {
    detail::put_u16(out, static_cast<std::uint16_t>(rec.name.size()));
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    out.push_back(static_cast<std::uint8_t>(rec.shape.size()));
    for (auto d : rec.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : rec.values) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader rd{bytes};
  if (rd.str(4) != "SLCN") throw Error("checkpoint: bad magic");
  std::uint16_t version = rd.u16();
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));

  std::uint32_t json_len = rd.u32();
  std::string config_json = rd.str(json_len);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(config_json);
  } catch (const nlohmann::json::exception&) {
    throw Error("checkpoint: invalid config block");
  }

  Checkpoint ckpt;
  detail::check_keys(j, "checkpoint", {"model", "meta"});
  ckpt.config = model_config_from_json(detail::need(j, "checkpoint", "model"), "checkpoint.model");
  if (j.contains("meta")) {
    const auto& jm = j.at("meta");
    detail::check_keys(jm, "checkpoint.meta", {"epoch", "best_metric", "metric", "labels"});
    ckpt.meta.epoch = detail::opt_int(jm, "checkpoint.meta", "epoch", 0);
    ckpt.meta.best_metric = detail::opt_num(jm, "checkpoint.meta", "best_metric", 0.0);
    if (jm.contains("metric")) ckpt.meta.metric_name = jm.at("metric").get<std::string>();
    if (jm.contains("labels"))
      for (const auto& l : jm.at("labels")) ckpt.meta.labels.push_back(l.get<std::string>());
  }

  std::uint32_t count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    std::uint16_t name_len = rd.u16();
    if (name_len == 0) throw Error("checkpoint: corrupt tensor record");
    rec.name = rd.str(name_len);
    std::uint8_t rank = rd.u8();
    if (rank == 0 || rank > 8) throw Error("checkpoint: corrupt tensor record");
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t dim = rd.u32();
      if (dim == 0 || dim > (1u << 30)) throw Error("checkpoint: corrupt tensor record");
      rec.shape.push_back(static_cast<std::int64_t>(dim));
      n *= dim;
      if (n > bytes.size()) throw Error("checkpoint: corrupt tensor record");
    }
    rd.need(n * 4);  // whole payload must be present before reading any of it
    rec.values.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) rec.values[k] = rd.f32();
    ckpt.tensors.push_back(std::move(rec));
  }
  if (rd.pos != bytes.size()) throw Error("checkpoint: trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_checkpoint: cannot open '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("save_checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace slcn
