// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siplkit/degrade.hpp"
#include "siplkit/hash.hpp"
#include "siplkit/image.hpp"

namespace siplkit {

struct CorpusOptions {
  std::filesystem::path out_dir;
  std::int64_t height = 64;
  std::int64_t width = 64;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct SplitCounts {
  int train = 0, val = 0, test = 0;
};

inline SplitCounts split_counts(int n, double val_fraction, double test_fraction) {
  SplitCounts c;
  c.val = static_cast<int>(std::lround(n * val_fraction));
  c.test = static_cast<int>(std::lround(n * test_fraction));
  c.train = n - c.val - c.test;
  if (c.train < 0) throw ConfigError("split fractions leave no room for training pairs");
  return c;
}

struct ManifestEntry {
  std::string path_clean;
  std::string path_degraded;
  int task_id = 0;
  std::string task;
  DegradationSpec spec;  // spec.seed is the per-sample seed
  std::string split;
  int index = 0;
  std::int64_t height = 0, width = 0;

  nlohmann::json to_json() const {
    nlohmann::json kinds = nlohmann::json::array();
    for (Kind k : spec.kinds) kinds.push_back(std::string(kind_name(k)));
    return nlohmann::json{{"path_clean", path_clean}, {"path_degraded", path_degraded}, {"task_id", task_id},
                          {"task", task},           {"kinds", kinds},                  {"params", params_to_json(spec)},
                          {"seed", spec.seed},      {"split", split},                  {"index", index},
                          {"height", height},       {"width", width}};
  }

  static ManifestEntry from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.path_clean = j.at("path_clean").get<std::string>();
    e.path_degraded = j.at("path_degraded").get<std::string>();
    e.task_id = j.at("task_id").get<int>();
    e.task = j.at("task").get<std::string>();
    e.spec = spec_from_json(j.at("kinds"), j.at("params"), j.at("seed").get<std::uint64_t>());
    e.split = j.at("split").get<std::string>();
    e.index = j.value("index", 0);
    e.height = j.value("height", std::int64_t{0});
    e.width = j.value("width", std::int64_t{0});
    return e;
  }
};

struct CorpusManifest {
  std::filesystem::path root;           // directory holding manifest.jsonl
  std::vector<ManifestEntry> entries;
  std::vector<std::string> task_names;  // indexed by task_id

  std::filesystem::path manifest_path() const { return root / "manifest.jsonl"; }

  std::vector<const ManifestEntry*> split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
      if (e.split == name) out.push_back(&e);
    }
    return out;
  }

  std::string serialize() const {
    std::string s;
    for (const auto& e : entries) s += e.to_json().dump() + "\n";
    return s;
  }

  /// Covers the manifest text and the bytes of every image it lists.
  std::string hash() const {
    Sha256 h;
    h.update(serialize());
    for (const auto& e : entries) {
      h.update_file(root / e.path_clean);
      h.update_file(root / e.path_degraded);
    }
    return h.hex();
  }

  /// Hash of the manifest text only (cheap; identifies the recipe and seeds).
  std::string manifest_hash() const { return sha256_hex(serialize()); }
};

/// Generates every (clean, degraded) pair for `tasks` and writes PNGs plus
/// manifest.jsonl under opt.out_dir. Layout: <task>/<split>/<index>_{clean,degraded}.png.
/// Per-sample seeds derive from (split_seed, task_id, index) and are unique
/// across splits.
inline CorpusManifest build_corpus(const std::vector<DegradationSpec>& tasks, int n_per_task,
                                   std::uint64_t split_seed, const CorpusOptions& opt) {
  if (tasks.empty()) throw ConfigError("build_corpus: task list is empty");
  if (n_per_task <= 0) throw ConfigError("build_corpus: n_per_task must be positive");
  const SplitCounts counts = split_counts(n_per_task, opt.val_fraction, opt.test_fraction);
  std::error_code ec;
  std::filesystem::create_directories(opt.out_dir, ec);
  if (ec) throw IoError("cannot create corpus directory " + opt.out_dir.string() + ": " + ec.message());

  CorpusManifest m;
  m.root = opt.out_dir;
  std::set<std::string> seen_names;
  std::set<std::uint64_t> seen_seeds;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    tasks[t].validate();
    const std::string name = tasks[t].name();
    if (!seen_names.insert(name).second) throw ConfigError("duplicate task " + name);
    m.task_names.push_back(name);
    for (int i = 0; i < n_per_task; ++i) {
      ManifestEntry e;
      e.task_id = static_cast<int>(t);
      e.task = name;
      e.index = i;
      e.split = i < counts.train ? "train" : (i < counts.train + counts.val ? "val" : "test");
      e.spec = tasks[t];
      e.spec.seed = derive_seed(split_seed, "sample", t, static_cast<std::uint64_t>(i));
      if (!seen_seeds.insert(e.spec.seed).second) throw Error("seed collision while building corpus");
      e.height = opt.height;
      e.width = opt.width;
      std::ostringstream stem;
      stem << name << '/' << e.split << '/';
      stem.width(5);
      stem.fill('0');
      stem << i;
      e.path_clean = stem.str() + "_clean.png";
      e.path_degraded = stem.str() + "_degraded.png";
      const Image clean = gen_clean(e.spec.seed, opt.height, opt.width);
      write_png(opt.out_dir / e.path_clean, clean);
      write_png(opt.out_dir / e.path_degraded, apply_degradation(clean, e.spec));
      m.entries.push_back(std::move(e));
    }
  }
  std::ofstream out(m.manifest_path(), std::ios::binary);
  if (!out) throw IoError("cannot write " + m.manifest_path().string());
  out << m.serialize();
  if (!out) throw IoError("failed writing " + m.manifest_path().string());
  return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& path_or_dir) {
  const auto path = std::filesystem::is_directory(path_or_dir) ? path_or_dir / "manifest.jsonl" : path_or_dir;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  CorpusManifest m;
  m.root = path.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      m.entries.push_back(ManifestEntry::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("malformed manifest line in " + path.string() + ": " + ex.what());
    }
    const auto& e = m.entries.back();
    if (static_cast<std::size_t>(e.task_id) >= m.task_names.size()) m.task_names.resize(e.task_id + 1);
    m.task_names[e.task_id] = e.task;
  }
  return m;
}

/// Reads the PNG pairs of one split into memory.
inline std::vector<SamplePair> load_split(const CorpusManifest& m, const std::string& split) {
  std::vector<SamplePair> out;
  for (const auto* e : m.split(split)) {
    out.push_back(SamplePair{read_png(m.root / e->path_clean), read_png(m.root / e->path_degraded), e->spec, e->task_id});
  }
  return out;
}

}  // namespace siplkit
