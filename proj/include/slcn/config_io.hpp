#pragma once

// JSON (de)serialization for model configs, with strict key checking:
// unknown keys are errors, never silently ignored.

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "slcn/model.hpp"

namespace slcn {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& ctx,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error(ctx + ": expected an object");
  for (auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw Error(ctx + ": unknown key '" + key + "'");
  }
}

inline const nlohmann::json& need(const nlohmann::json& j, const std::string& ctx,
                                  const char* key) {
  if (!j.contains(key)) throw Error(ctx + ": missing key '" + key + "'");
  return j.at(key);
}

inline std::int64_t need_int(const nlohmann::json& j, const std::string& ctx, const char* key) {
  const auto& v = need(j, ctx, key);
  if (!v.is_number_integer()) throw Error(ctx + ": '" + std::string(key) + "' must be an integer");
  return v.get<std::int64_t>();
}

inline std::int64_t opt_int(const nlohmann::json& j, const std::string& ctx, const char* key,
                            std::int64_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number_integer())
    throw Error(ctx + ": '" + std::string(key) + "' must be an integer");
  return j.at(key).get<std::int64_t>();
}

inline double need_num(const nlohmann::json& j, const std::string& ctx, const char* key) {
  const auto& v = need(j, ctx, key);
  if (!v.is_number()) throw Error(ctx + ": '" + std::string(key) + "' must be a number");
  return v.get<double>();
}

inline double opt_num(const nlohmann::json& j, const std::string& ctx, const char* key,
                      double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) throw Error(ctx + ": '" + std::string(key) + "' must be a number");
  return j.at(key).get<double>();
}

inline std::string need_str(const nlohmann::json& j, const std::string& ctx, const char* key) {
  const auto& v = need(j, ctx, key);
  if (!v.is_string()) throw Error(ctx + ": '" + std::string(key) + "' must be a string");
  return v.get<std::string>();
}

inline bool opt_bool(const nlohmann::json& j, const std::string& ctx, const char* key,
                     bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean())
    throw Error(ctx + ": '" + std::string(key) + "' must be a boolean");
  return j.at(key).get<bool>();
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["input_len"] = cfg.input_len;
  j["sample_rate"] = cfg.sample_rate;
  j["stem"] = {{"kernel", cfg.stem.kernel},
               {"stride", cfg.stem.stride},
               {"filters", cfg.stem.filters},
               {"batchnorm", cfg.stem.batchnorm}};
  j["blocks"] = nlohmann::json::array();
  for (const auto& b : cfg.blocks) {
    nlohmann::json jb;
    jb["kind"] = b.kind == BlockKind::rese2 ? "rese2" : "basic";
    jb["filters"] = b.filters;
    jb["pool_size"] = b.pool_size;
    jb["conv_kernel"] = b.conv_kernel;
    if (b.kind == BlockKind::rese2) jb["se_reduction"] = b.se_reduction;
    j["blocks"].push_back(std::move(jb));
  }
  j["concat_taps"] = cfg.concat_taps;
  j["head"] = {{"hidden", cfg.head.hidden},
               {"n_classes", cfg.head.n_classes},
               {"output", cfg.head.output == OutputKind::sigmoid_multilabel ? "sigmoid" : "softmax"}};
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& ctx) {
  detail::check_keys(j, ctx, {"input_len", "sample_rate", "stem", "blocks", "concat_taps", "head"});
  ModelConfig cfg;
  cfg.input_len = detail::need_int(j, ctx, "input_len");
  cfg.sample_rate = detail::need_int(j, ctx, "sample_rate");

  const auto& js = detail::need(j, ctx, "stem");
  std::string sctx = ctx + ".stem";
  detail::check_keys(js, sctx, {"kernel", "stride", "filters", "batchnorm"});
  cfg.stem.kernel = detail::need_int(js, sctx, "kernel");
  cfg.stem.stride = detail::need_int(js, sctx, "stride");
  cfg.stem.filters = detail::need_int(js, sctx, "filters");
  cfg.stem.batchnorm = detail::opt_bool(js, sctx, "batchnorm", true);

  const auto& jb = detail::need(j, ctx, "blocks");
  if (!jb.is_array()) throw Error(ctx + ": 'blocks' must be an array");
  for (std::size_t i = 0; i < jb.size(); ++i) {
    std::string bctx = ctx + ".blocks[" + std::to_string(i) + "]";
    detail::check_keys(jb[i], bctx, {"kind", "filters", "pool_size", "conv_kernel", "se_reduction"});
    BlockSpec b;
    std::string kind = detail::need_str(jb[i], bctx, "kind");
    if (kind == "basic") b.kind = BlockKind::basic;
    else if (kind == "rese2") b.kind = BlockKind::rese2;
    else throw Error(bctx + ": unknown kind '" + kind + "'");
    b.filters = detail::need_int(jb[i], bctx, "filters");
    b.pool_size = detail::need_int(jb[i], bctx, "pool_size");
    b.conv_kernel = detail::need_int(jb[i], bctx, "conv_kernel");
    if (b.kind == BlockKind::rese2) {
      b.se_reduction = detail::opt_int(jb[i], bctx, "se_reduction", 16);
    } else if (jb[i].contains("se_reduction")) {
      throw Error(bctx + ": se_reduction only applies to rese2 blocks");
    }
    cfg.blocks.push_back(b);
  }

  const auto& jt = detail::need(j, ctx, "concat_taps");
  if (!jt.is_array()) throw Error(ctx + ": 'concat_taps' must be an array");
  for (const auto& t : jt) {
    if (!t.is_number_integer()) throw Error(ctx + ": concat_taps must be integers");
    cfg.concat_taps.push_back(t.get<std::int64_t>());
  }

  const auto& jh = detail::need(j, ctx, "head");
  std::string hctx = ctx + ".head";
  detail::check_keys(jh, hctx, {"hidden", "n_classes", "output"});
  cfg.head.hidden = detail::opt_int(jh, hctx, "hidden", 0);
  cfg.head.n_classes = detail::need_int(jh, hctx, "n_classes");
  std::string out = detail::need_str(jh, hctx, "output");
  if (out == "sigmoid") cfg.head.output = OutputKind::sigmoid_multilabel;
  else if (out == "softmax") cfg.head.output = OutputKind::softmax_multiclass;
  else throw Error(hctx + ": output must be 'sigmoid' or 'softmax'");

  validate_config(cfg);
  return cfg;
}

}  // namespace slcn
