#pragma once

// Clip manifests, segment planning, and a decoded-waveform cache.
//
// A manifest is JSON Lines, one clip per line:
//   {"path": "clips/a.wav", "labels": ["guitar", "loud"], "split": "train"}
// Relative clip paths resolve against the manifest's directory. The label
// vocabulary is the sorted set of all label strings in the file.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "slcn/resample.hpp"
#include "slcn/tensor.hpp"
#include "slcn/wav.hpp"

namespace slcn {

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    default: return "test";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + s + "'");
}

struct ClipRecord {
  std::string path;                // resolved
  std::vector<std::int64_t> labels;  // vocabulary indices, sorted unique
  Split split = Split::train;
};

struct Manifest {
  std::vector<ClipRecord> records;
  std::vector<std::string> labels;  // sorted vocabulary

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
};

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_manifest: cannot open '" + path + "'");
  std::filesystem::path base = std::filesystem::path(path).parent_path();

  struct RawRecord {
    std::string path;
    std::vector<std::string> labels;
    Split split;
  };
  std::vector<RawRecord> raw;
  std::set<std::string> seen_paths;
  std::set<std::string> vocab;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string at = "load_manifest line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error(at + "invalid JSON");
    }
    if (!j.is_object()) throw Error(at + "expected an object");
    for (auto& [key, value] : j.items())
      if (key != "path" && key != "labels" && key != "split")
        throw Error(at + "unknown key '" + key + "'");
    if (!j.contains("path") || !j["path"].is_string() || j["path"].get<std::string>().empty())
      throw Error(at + "missing or invalid 'path'");
    if (!j.contains("labels") || !j["labels"].is_array())
      throw Error(at + "missing or invalid 'labels'");
    if (!j.contains("split") || !j["split"].is_string())
      throw Error(at + "missing or invalid 'split'");

    RawRecord rec;
    rec.path = j["path"].get<std::string>();
    if (!seen_paths.insert(rec.path).second)
      throw Error(at + "duplicate clip '" + rec.path + "'");
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) throw Error(at + "labels must be strings");
      rec.labels.push_back(l.get<std::string>());
      vocab.insert(rec.labels.back());
    }
    try {
      rec.split = parse_split(j["split"].get<std::string>());
    } catch (const Error& e) {
      throw Error(at + e.what());
    }
    raw.push_back(std::move(rec));
  }
  if (raw.empty()) throw Error("load_manifest: empty manifest '" + path + "'");

  Manifest m;
  m.labels.assign(vocab.begin(), vocab.end());  // std::set iterates sorted
  std::map<std::string, std::int64_t> index;
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    index[m.labels[i]] = static_cast<std::int64_t>(i);

  for (auto& rec : raw) {
    ClipRecord out;
    std::filesystem::path p(rec.path);
    out.path = p.is_absolute() ? p.string() : (base / p).string();
    out.split = rec.split;
    std::set<std::int64_t> ids;
    for (const auto& l : rec.labels) ids.insert(index[l]);
    out.labels.assign(ids.begin(), ids.end());
    m.records.push_back(std::move(out));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Segments

struct SegmentPlan {
  std::int64_t segment_len = 0;
  std::vector<std::int64_t> offsets;  // non-decreasing; first 0, last clip-seg
  std::int64_t padded_len = 0;        // >= clip length; covers the zero-pad case
};

/// Evenly spaced segment offsets covering the clip. A clip shorter than one
/// segment yields a single zero-padded segment regardless of `n_segments`.
inline SegmentPlan plan_segments(std::int64_t clip_len, std::int64_t segment_len,
                                 std::int64_t n_segments) {
  if (segment_len < 1) throw Error("plan_segments: segment_len must be >= 1");
  if (clip_len < 0) throw Error("plan_segments: negative clip length");
  if (n_segments < 1) throw Error("plan_segments: n_segments must be >= 1");
  SegmentPlan plan;
  plan.segment_len = segment_len;
  if (clip_len <= segment_len) {
    plan.offsets = {0};
    plan.padded_len = segment_len;
    return plan;
  }
  plan.padded_len = clip_len;
  std::int64_t span = clip_len - segment_len;
  if (n_segments == 1) {
    plan.offsets = {0};
    return plan;
  }
  plan.offsets.resize(static_cast<std::size_t>(n_segments));
  for (std::int64_t i = 0; i < n_segments; ++i)
    plan.offsets[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(span) /
                     static_cast<double>(n_segments - 1)));
  return plan;
}

/// ceil(clip/segment): every sample belongs to at least one segment.
inline std::int64_t default_segment_count(std::int64_t clip_len, std::int64_t segment_len) {
  if (segment_len < 1) throw Error("default_segment_count: segment_len must be >= 1");
  if (clip_len <= segment_len) return 1;
  return (clip_len + segment_len - 1) / segment_len;
}

/// Copies segment `i` of the plan, zero-padding past the end of the clip.
inline std::vector<float> extract_segment(const std::vector<float>& samples,
                                          const SegmentPlan& plan, std::size_t i) {
  if (i >= plan.offsets.size()) throw Error("extract_segment: segment index out of range");
  std::vector<float> out(static_cast<std::size_t>(plan.segment_len), 0.0f);
  std::int64_t off = plan.offsets[i];
  auto n = static_cast<std::int64_t>(samples.size());
  for (std::int64_t t = 0; t < plan.segment_len; ++t)
    if (off + t < n) out[static_cast<std::size_t>(t)] = samples[static_cast<std::size_t>(off + t)];
  return out;
}

// ---------------------------------------------------------------------------
// Waveform cache

/// Decodes each clip once, resampled to the model rate, and keeps it.
/// Sized for desk-scale corpora; everything lives in memory.
class ClipStore {
 public:
  ClipStore(const Manifest& manifest, int target_rate)
      : manifest_(manifest), target_rate_(target_rate), cache_(manifest.records.size()) {}

  const std::vector<float>& waveform(std::size_t record_index) {
    if (record_index >= cache_.size()) throw Error("clip store: record index out of range");
    auto& slot = cache_[record_index];
    if (!slot) {
      Waveform w = load_wav(manifest_.records[record_index].path);
      if (w.sample_rate != target_rate_) w = resample(w, target_rate_);
      slot = std::move(w.samples);
    }
    return *slot;
  }

  int target_rate() const { return target_rate_; }

 private:
  const Manifest& manifest_;
  int target_rate_;
  std::vector<std::optional<std::vector<float>>> cache_;
};

}  // namespace slcn
