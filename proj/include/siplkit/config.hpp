// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Configuration records and their JSON form. Parsing is strict: an unknown
// key anywhere is a ConfigError.

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siplkit/error.hpp"
#include "siplkit/hash.hpp"
#include "siplkit/privfusion.hpp"
#include "siplkit/restore.hpp"

namespace siplkit {

using nlohmann::json;

struct CorpusConfig {
  std::string tasks = "noise25,rain";
  int n_per_task = 124;
  std::uint64_t seed = 7;
  std::int64_t height = 64;
  std::int64_t width = 64;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct TrainConfig {
  Regime regime = Regime::sipl;
  int epochs = 30;
  int batch_size = 8;
  double lr = 2e-4;
  double lr_min = 1e-6;  // cosine decay floor
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  AlphaSchedule alpha_schedule;
  double p_nopi = 0.3;
  double p_selfpi = 0.0;
  double selfpi_fraction = 0.2;  // self-PI steps only in this trailing fraction of epochs
  std::uint64_t seed = 0;
  BackboneConfig backbone;
  int dict_entries = 64;
  int heads = 1;

  ModelConfig model_config() const { return ModelConfig{backbone, regime, dict_entries, heads}; }

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0) || lr_min < 0.0) throw ConfigError("learning rates must be positive");
    if (p_nopi < 0.0 || p_selfpi < 0.0 || p_nopi + p_selfpi > 1.0 + 1e-12) {
      throw ConfigError("p_nopi and p_selfpi must be non-negative with p_nopi + p_selfpi <= 1");
    }
    if (selfpi_fraction < 0.0 || selfpi_fraction > 1.0) throw ConfigError("selfpi_fraction must lie in [0,1]");
    alpha_schedule.validate();
    backbone.validate();
    if (dict_entries < 1) throw ConfigError("dict_entries must be positive");
    if (heads < 1 || backbone.bottleneck_channels() % heads != 0) {
      throw ConfigError("heads must divide the bottleneck channel count");
    }
  }
};

namespace detail {

class StrictReader {
 public:
  StrictReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& ex) {
      throw ConfigError("bad value for " + section_ + "." + key + ": " + ex.what());
    }
  }

  template <typename E, typename Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string s;
    used_.insert(key);
    if (!j_.contains(key)) return;
    get(key, s);
    out = parse(s);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("unknown config key '" + section_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> used_;
};

inline std::string activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

inline std::string decay_name(AlphaSchedule::Decay d) { return d == AlphaSchedule::Decay::linear ? "linear" : "cosine"; }

inline AlphaSchedule::Decay parse_decay(const std::string& s) {
  if (s == "linear") return AlphaSchedule::Decay::linear;
  if (s == "cosine") return AlphaSchedule::Decay::cosine;
  throw ConfigError("unknown alpha decay '" + s + "'");
}

}  // namespace detail

inline json to_json(const CorpusConfig& c) {
  return {{"tasks", c.tasks},   {"n_per_task", c.n_per_task}, {"seed", c.seed},
          {"height", c.height}, {"width", c.width},           {"val_fraction", c.val_fraction},
          {"test_fraction", c.test_fraction}};
}

inline void from_json_strict(const json& j, CorpusConfig& c) {
  detail::StrictReader r(j, "corpus");
  r.get("tasks", c.tasks);
  r.get("n_per_task", c.n_per_task);
  r.get("seed", c.seed);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("val_fraction", c.val_fraction);
  r.get("test_fraction", c.test_fraction);
  r.finish();
}

inline json model_section(const TrainConfig& t) {
  return {{"base_channels", t.backbone.base_channels},
          {"n_scales", t.backbone.n_scales},
          {"blocks_per_scale", t.backbone.blocks_per_scale},
          {"img_channels", t.backbone.img_channels},
          {"activation", detail::activation_name(t.backbone.activation)},
          {"dict_entries", t.dict_entries},
          {"heads", t.heads}};
}

inline json train_section(const TrainConfig& t) {
  return {{"regime", regime_name(t.regime)},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"lr_min", t.lr_min},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"p_nopi", t.p_nopi},
          {"p_selfpi", t.p_selfpi},
          {"selfpi_fraction", t.selfpi_fraction},
          {"seed", t.seed}};
}

inline json schedule_section(const AlphaSchedule& s) {
  return {{"alpha0", s.alpha0}, {"decay", detail::decay_name(s.decay)}, {"end_fraction", s.end_fraction}};
}

/// Full training snapshot as stored in checkpoints.
inline json to_json(const TrainConfig& t) {
  return {{"model", model_section(t)}, {"train", train_section(t)}, {"alpha_schedule", schedule_section(t.alpha_schedule)}};
}

inline void read_model_section(const json& j, TrainConfig& t) {
  detail::StrictReader r(j, "model");
  r.get("base_channels", t.backbone.base_channels);
  r.get("n_scales", t.backbone.n_scales);
  r.get("blocks_per_scale", t.backbone.blocks_per_scale);
  r.get("img_channels", t.backbone.img_channels);
  r.get_enum("activation", t.backbone.activation, detail::parse_activation);
  r.get("dict_entries", t.dict_entries);
  r.get("heads", t.heads);
  r.finish();
}

inline void read_train_section(const json& j, TrainConfig& t) {
  detail::StrictReader r(j, "train");
  r.get_enum("regime", t.regime, parse_regime);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("lr_min", t.lr_min);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("eps", t.eps);
  r.get("p_nopi", t.p_nopi);
  r.get("p_selfpi", t.p_selfpi);
  r.get("selfpi_fraction", t.selfpi_fraction);
  r.get("seed", t.seed);
  r.finish();
}

inline void read_schedule_section(const json& j, AlphaSchedule& s) {
  detail::StrictReader r(j, "alpha_schedule");
  r.get("alpha0", s.alpha0);
  r.get_enum("decay", s.decay, detail::parse_decay);
  r.get("end_fraction", s.end_fraction);
  r.finish();
}

inline void from_json_strict(const json& j, TrainConfig& t) {
  detail::StrictReader r(j, "checkpoint config");
  json model, train, sched;
  r.get("model", model);
  r.get("train", train);
  r.get("alpha_schedule", sched);
  r.finish();
  if (!model.is_null()) read_model_section(model, t);
  if (!train.is_null()) read_train_section(train, t);
  if (!sched.is_null()) read_schedule_section(sched, t.alpha_schedule);
}

inline json to_json(const InferenceConfig& c) {
  return {{"iters", c.iters},
          {"pi_mode", pi_mode_name(c.pi_mode)},
          {"clip_each_iter", c.clip_each_iter},
          {"iter0_self_pi", c.iter0_self_pi}};
}

inline void from_json_strict(const json& j, InferenceConfig& c) {
  detail::StrictReader r(j, "inference");
  r.get("iters", c.iters);
  r.get_enum("pi_mode", c.pi_mode, parse_pi_mode);
  r.get("clip_each_iter", c.clip_each_iter);
  r.get("iter0_self_pi", c.iter0_self_pi);
  r.finish();
}

/// Everything one CLI invocation needs; sections mirror the JSON config file.
struct RunConfig {
  CorpusConfig corpus;
  TrainConfig train;
  InferenceConfig inference;

  json to_json() const {
    return {{"corpus", siplkit::to_json(corpus)},
            {"model", model_section(train)},
            {"train", train_section(train)},
            {"alpha_schedule", schedule_section(train.alpha_schedule)},
            {"inference", siplkit::to_json(inference)}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig rc;
    detail::StrictReader r(j, "<root>");
    json corpus, model, train, sched, inference;
    r.get("corpus", corpus);
    r.get("model", model);
    r.get("train", train);
    r.get("alpha_schedule", sched);
    r.get("inference", inference);
    r.finish();
    if (!corpus.is_null()) from_json_strict(corpus, rc.corpus);
    if (!model.is_null()) read_model_section(model, rc.train);
    if (!train.is_null()) read_train_section(train, rc.train);
    if (!sched.is_null()) read_schedule_section(sched, rc.train.alpha_schedule);
    if (!inference.is_null()) from_json_strict(inference, rc.inference);
    return rc;
  }

  std::string hash() const { return sha256_hex(to_json().dump()); }
};

/// Sets "section.key" in a config JSON from text, typed by the existing value.
inline void apply_override(json& cfg, const std::string& dotted, const std::string& text) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must look like section.key: " + dotted);
  const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  if (!cfg.contains(section) || !cfg[section].contains(key)) throw ConfigError("unknown config key '" + dotted + "'");
  json& slot = cfg[section][key];
  try {
    if (slot.is_boolean()) {
      if (text != "true" && text != "false") throw ConfigError("expected true/false");
      slot = text == "true";
    } else if (slot.is_number_unsigned()) {
      slot = static_cast<std::uint64_t>(std::stoull(text));
    } else if (slot.is_number_integer()) {
      slot = static_cast<std::int64_t>(std::stoll(text));
    } else if (slot.is_number_float()) {
      slot = std::stod(text);
    } else {
      slot = text;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad value '" + text + "' for " + dotted);
  }
}

/// Every overridable "section.key" with its default rendered as text.
inline std::vector<std::pair<std::string, std::string>> config_fields(const json& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [section, body] : cfg.items()) {
    for (const auto& [key, value] : body.items()) {
      out.emplace_back(section + "." + key, value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return out;
}

}  // namespace siplkit
