// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// L1 training with Adam for the baseline, pl and sipl regimes, a task-balanced
// sampler, per-epoch validation, and a byte-stable checkpoint format:
//
//   [u64 little-endian header length][JSON header][raw little-endian float32 tensors]
//
// Sampler order and per-step mode draws are counter-based functions of
// (seed, epoch, step), so a resumed run replays the same stream.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siplkit/config.hpp"
#include "siplkit/corpus.hpp"
#include "siplkit/metrics.hpp"
#include "siplkit/ops.hpp"
#include "siplkit/restore.hpp"

namespace siplkit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
Var<T> loss(Var<T> restored, Var<T> clean) {
  return l1_loss(restored, clean);
}

/// Cosine decay from lr to lr_min over the whole run.
inline double lr_at(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 1) return cfg.lr;
  const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * p));
}

class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::map<std::string, Tensor<float>>& first_moments() { return m_; }
  std::map<std::string, Tensor<float>>& second_moments() { return v_; }
  const std::map<std::string, Tensor<float>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<float>>& second_moments() const { return v_; }

  void step(ParamStore<float>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(eps_);
    for (auto& [name, p] : params) {
      if (!p.requires_grad) continue;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto& m = slot(m_, name, p.value.shape());
      auto& v = slot(v_, name, p.value.shape());
      float* w = p.value.data();
      const float* g = p.grad.data();
      float* mm = m.data();
      float* vv = v.data();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        mm[i] = b1 * mm[i] + (1.0f - b1) * g[i];
        vv[i] = b2 * vv[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= step_size * mm[i] / (std::sqrt(vv[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

 private:
  static Tensor<float>& slot(std::map<std::string, Tensor<float>>& map, const std::string& name, const Shape& shape) {
    auto it = map.find(name);
    if (it == map.end()) it = map.emplace(name, Tensor<float>(shape)).first;
    return it->second;
  }

  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  TrainConfig config;
  int epoch = 0;            // epochs completed
  std::int64_t step = 0;    // optimizer steps taken
  std::map<std::string, Tensor<float>> tensors;  // parameters and adam.m.* / adam.v.*
  nlohmann::json meta = nlohmann::json::object();

  std::string serialize() const {
    nlohmann::json list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
      list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", t.size()}});
      offset += t.size() * sizeof(float);
    }
    const nlohmann::json header{{"format", "sipl-kit-checkpoint"},
                                {"format_version", kFormatVersion},
                                {"config", to_json(config)},
                                {"epoch", epoch},
                                {"step", step},
                                {"rng", {{"scheme", "counter"}, {"seed", config.seed}}},
                                {"meta", meta},
                                {"tensors", list}};
    const std::string text = header.dump();
    std::string out(8, '\0');
    const std::uint64_t len = text.size();
    std::memcpy(out.data(), &len, 8);
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [_, t] : tensors) {
      out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
    }
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < 8) throw IoError("checkpoint truncated");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), 8);
    if (len > bytes.size() - 8) throw IoError("checkpoint header length exceeds file size");
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError(std::string("checkpoint header is not JSON: ") + ex.what());
    }
    if (h.value("format", "") != "sipl-kit-checkpoint") throw IoError("not a sipl-kit checkpoint");
    if (h.value("format_version", 0) != kFormatVersion) throw IoError("unsupported checkpoint format version");
    Checkpoint c;
    from_json_strict(h.at("config"), c.config);
    c.epoch = h.at("epoch").get<int>();
    c.step = h.at("step").get<std::int64_t>();
    c.meta = h.value("meta", nlohmann::json::object());
    const std::size_t base = 8 + len;
    for (const auto& e : h.at("tensors")) {
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      if (base + offset + length * sizeof(float) > bytes.size()) throw IoError("checkpoint tensor data truncated");
      Tensor<float> t(e.at("shape").get<Shape>());
      if (t.size() != length) throw IoError("checkpoint tensor length disagrees with its shape");
      std::memcpy(t.data(), bytes.data() + base + offset, length * sizeof(float));
      c.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::string bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return deserialize(std::string(bytes.begin(), bytes.end()));
  }

  std::string hash() const { return sha256_hex(serialize()); }
};

inline Checkpoint make_checkpoint(const Model<float>& model, const Adam* adam, const TrainConfig& cfg, int epoch,
                                  std::int64_t step) {
  Checkpoint c;
  c.config = cfg;
  c.epoch = epoch;
  c.step = step;
  for (const auto& [name, p] : model.params()) c.tensors.emplace(name, p.value);
  if (adam) {
    for (const auto& [name, m] : adam->first_moments()) c.tensors.emplace("adam.m." + name, m);
    for (const auto& [name, v] : adam->second_moments()) c.tensors.emplace("adam.v." + name, v);
  }
  return c;
}

/// Copies the checkpoint's parameter tensors into `model`.
inline void load_weights(const Checkpoint& c, Model<float>& model) {
  for (auto& [name, p] : model.params()) {
    const auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw IoError("checkpoint lacks parameter " + name);
    if (it->second.shape() != p.value.shape()) throw ShapeMismatch("checkpoint parameter " + name + " has a different shape");
    p.value = it->second;
  }
}

inline std::unique_ptr<Model<float>> model_from_checkpoint(const Checkpoint& c) {
  auto model = std::make_unique<Model<float>>(c.config.model_config(), c.config.seed);
  load_weights(c, *model);
  return model;
}

inline void load_optimizer(const Checkpoint& c, Adam& adam) {
  for (const auto& [name, t] : c.tensors) {
    if (name.starts_with("adam.m.")) adam.first_moments()[name.substr(7)] = t;
    if (name.starts_with("adam.v.")) adam.second_moments()[name.substr(7)] = t;
  }
  adam.set_steps(c.step);
}

// ---------------------------------------------------------------------------
// Steps

enum class StepMode { plain, blend, nopi, gt_pi, self_pi };

inline std::string step_mode_name(StepMode m) {
  switch (m) {
    case StepMode::plain: return "plain";
    case StepMode::blend: return "blend";
    case StepMode::nopi: return "nopi";
    case StepMode::gt_pi: return "gt";
    case StepMode::self_pi: return "self";
  }
  return "?";
}

struct Batch {
  Tensor<float> degraded;  // [N,H,W,C]
  Tensor<float> clean;
};

struct StepReport {
  int epoch = 0;
  std::int64_t step = 0;
  StepMode mode = StepMode::plain;
  double alpha = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  bool pd_grad_nonzero = false;
};

/// Per-step mode for a sipl run: no PI with p_nopi, self-PI with p_selfpi in the
/// trailing selfpi_fraction of epochs, ground-truth PI otherwise.
inline StepMode draw_sipl_mode(const TrainConfig& cfg, int epoch, std::int64_t step) {
  Rng rng(derive_seed(cfg.seed, "mode", static_cast<std::uint64_t>(step)));
  const double u = rng.uniform();
  if (u < cfg.p_nopi) return StepMode::nopi;
  const bool self_window = epoch >= (1.0 - cfg.selfpi_fraction) * cfg.epochs;
  if (self_window && u < cfg.p_nopi + cfg.p_selfpi) return StepMode::self_pi;
  return StepMode::gt_pi;
}

/// One optimizer step. Gradients are cleared first; `lr` is the already
/// scheduled learning rate.
inline StepReport train_step(Model<float>& model, Adam& adam, const Batch& batch, const TrainConfig& cfg, int epoch,
                             std::int64_t step, double lr) {
  StepReport rep;
  rep.epoch = epoch;
  rep.step = step;
  rep.lr = lr;
  model.zero_grad();
  Tape<float> tape(true);
  Var<float> d = tape.constant(batch.degraded);
  Var<float> clean = tape.constant(batch.clean);
  Var<float> out;
  switch (cfg.regime) {
    case Regime::baseline:
      rep.mode = StepMode::plain;
      out = model.forward(tape, d);
      break;
    case Regime::pl:
      rep.mode = StepMode::blend;
      rep.alpha = alpha_at(cfg.alpha_schedule, epoch, cfg.epochs);
      out = model.forward_blend(tape, d, clean, rep.alpha);
      break;
    case Regime::sipl:
      rep.mode = draw_sipl_mode(cfg, epoch, step);
      if (rep.mode == StepMode::nopi) {
        out = model.forward(tape, d);
      } else if (rep.mode == StepMode::gt_pi) {
        out = model.forward(tape, d, clean);
      } else {
        const Tensor<float> self = clip01(model.predict(batch.degraded));
        out = model.forward(tape, d, tape.constant(self));
      }
      break;
  }
  Var<float> l = loss(out, clean);
  rep.loss = l.value().item();
  if (!std::isfinite(rep.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << epoch << " step " << step << " (regime " << regime_name(cfg.regime)
        << ", mode " << step_mode_name(rep.mode) << ", alpha " << rep.alpha << ", lr " << lr << ")";
    throw NonFiniteLoss(msg.str());
  }
  tape.backward(l);
  for (const auto& [name, p] : model.params()) {
    if (!p.grad.all_finite()) {
      throw NonFiniteGradient("non-finite gradient in " + name + " at epoch " + std::to_string(epoch) + " step " +
                              std::to_string(step));
    }
  }
  if (const auto* pd = model.dictionary()) {
    for (float g : pd->matrix().grad.values()) {
      if (g != 0.0f) {
        rep.pd_grad_nonzero = true;
        break;
      }
    }
  }
  adam.step(model.params(), lr);
  return rep;
}

// ---------------------------------------------------------------------------
// Data and fitting

struct Dataset {
  std::vector<SamplePair> pairs;
  std::vector<std::string> task_names;

  int n_tasks() const { return static_cast<int>(task_names.size()); }
};

inline Dataset load_dataset(const CorpusManifest& m, const std::string& split) {
  return Dataset{load_split(m, split), m.task_names};
}

/// Pair indices for one epoch. Tasks take turns in shuffled rounds, so per-task
/// counts differ by at most one; within a task, pairs follow a shuffled pool.
inline std::vector<std::size_t> epoch_order(const Dataset& data, std::uint64_t seed, int epoch) {
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(std::max(1, data.n_tasks())));
  for (std::size_t i = 0; i < data.pairs.size(); ++i) {
    const auto tid = static_cast<std::size_t>(data.pairs[i].task_id);
    if (tid >= pools.size()) pools.resize(tid + 1);
    pools[tid].push_back(i);
  }
  std::vector<std::size_t> tasks;
  for (std::size_t t = 0; t < pools.size(); ++t) {
    if (pools[t].empty()) continue;
    Rng rng(derive_seed(seed, "sampler.pool", static_cast<std::uint64_t>(epoch), t));
    rng.shuffle(pools[t].begin(), pools[t].end());
    tasks.push_back(t);
  }
  std::vector<std::size_t> order;
  if (tasks.empty()) return order;
  std::vector<std::size_t> cursor(pools.size(), 0);
  for (std::uint64_t round = 0; order.size() < data.pairs.size(); ++round) {
    std::vector<std::size_t> turn = tasks;
    Rng rng(derive_seed(seed, "sampler.round", static_cast<std::uint64_t>(epoch), round));
    rng.shuffle(turn.begin(), turn.end());
    for (std::size_t t : turn) {
      if (order.size() == data.pairs.size()) break;
      auto& pool = pools[t];
      order.push_back(pool[cursor[t]++ % pool.size()]);
    }
  }
  return order;
}

inline Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<Image> d, c;
  for (std::size_t i : idx) {
    d.push_back(data.pairs[i].degraded);
    c.push_back(data.pairs[i].clean);
  }
  return Batch{stack_images<float>(d), stack_images<float>(c)};
}

struct ValidationReport {
  int epoch = 0;
  std::vector<double> per_task_psnr;  // no-PI restoration, indexed by task id
  double mean_psnr = 0.0;             // mean over tasks
};

/// Per-task mean PSNR of the no-PI forward on `data`.
inline ValidationReport validate(const Model<float>& model, const Dataset& data, int batch_size = 8) {
  ValidationReport rep;
  std::vector<double> sum(static_cast<std::size_t>(std::max(1, data.n_tasks())), 0.0);
  std::vector<int> count(sum.size(), 0);
  for (std::size_t start = 0; start < data.pairs.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.pairs.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    const auto outs = unstack_images(clip01(model.predict(b.degraded)));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto tid = static_cast<std::size_t>(data.pairs[idx[j]].task_id);
      if (tid >= sum.size()) {
        sum.resize(tid + 1, 0.0);
        count.resize(tid + 1, 0);
      }
      sum[tid] += psnr_capped(outs[j], data.pairs[idx[j]].clean);
      ++count[tid];
    }
  }
  double acc = 0.0;
  int tasks = 0;
  for (std::size_t t = 0; t < sum.size(); ++t) {
    rep.per_task_psnr.push_back(count[t] ? sum[t] / count[t] : std::numeric_limits<double>::quiet_NaN());
    if (count[t]) {
      acc += rep.per_task_psnr.back();
      ++tasks;
    }
  }
  rep.mean_psnr = tasks ? acc / tasks : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and logs; nothing written when empty
  const Checkpoint* resume = nullptr;            // continue from this state
  std::function<void(const StepReport&)> on_step;
  std::function<void(const ValidationReport&)> on_epoch;
};

struct FitResult {
  Checkpoint final_checkpoint;
  std::optional<Checkpoint> best_checkpoint;  // highest mean validation PSNR
  std::vector<ValidationReport> validation;
  std::vector<StepReport> steps;
};

inline nlohmann::json step_log_json(const StepReport& s, Regime regime) {
  return {{"epoch", s.epoch}, {"step", s.step}, {"regime", regime_name(regime)},
          {"mode", step_mode_name(s.mode)}, {"alpha", s.alpha}, {"loss", s.loss}};
}

/// Trains for cfg.epochs and returns the final state. With an out_dir, writes
/// final.ckpt, best.ckpt, train_log.jsonl and val_log.jsonl there.
inline FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& val, const FitOptions& opt = {}) {
  cfg.validate();
  if (train.pairs.empty() && cfg.epochs > 0) throw ConfigError("fit: training split is empty");
  Model<float> model(cfg.model_config(), cfg.seed);
  Adam adam(cfg.beta1, cfg.beta2, cfg.eps);
  int start_epoch = 0;
  double best_psnr = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  if (opt.resume) {
    if (to_json(opt.resume->config) != to_json(cfg)) throw ConfigError("resume checkpoint was written with a different config");
    load_weights(*opt.resume, model);
    load_optimizer(*opt.resume, adam);
    start_epoch = opt.resume->epoch;
    best_psnr = opt.resume->meta.value("best_val_psnr", best_psnr);
    best_epoch = opt.resume->meta.value("best_epoch", -1);
  }

  std::ofstream train_log, val_log;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    const auto mode = opt.resume ? std::ios::app : std::ios::trunc;
    train_log.open(*opt.out_dir / "train_log.jsonl", mode);
    val_log.open(*opt.out_dir / "val_log.jsonl", mode);
    if (!train_log || !val_log) throw IoError("cannot open logs in " + opt.out_dir->string());
  }

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((train.pairs.size() + bs - 1) / bs);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = adam.steps();
  FitResult result;
  auto snapshot = [&](int epochs_done) {
    Checkpoint c = make_checkpoint(model, &adam, cfg, epochs_done, step);
    c.meta = {{"best_epoch", best_epoch}};
    if (std::isfinite(best_psnr)) c.meta["best_val_psnr"] = best_psnr;
    return c;
  };

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(train, cfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      const StepReport rep = train_step(model, adam, make_batch(train, idx), cfg, epoch, step, lr_at(cfg, step, total_steps));
      ++step;
      if (train_log.is_open()) train_log << step_log_json(rep, cfg.regime).dump() << '\n';
      if (opt.on_step) opt.on_step(rep);
      result.steps.push_back(rep);
    }
    if (!val.pairs.empty()) {
      ValidationReport v = validate(model, val, cfg.batch_size);
      v.epoch = epoch;
      if (val_log.is_open()) {
        val_log << nlohmann::json{{"epoch", epoch}, {"regime", regime_name(cfg.regime)}, {"mean_psnr", v.mean_psnr},
                                  {"per_task_psnr", v.per_task_psnr}, {"task_names", val.task_names}}
                       .dump()
                << '\n';
      }
      if (v.mean_psnr > best_psnr) {
        best_psnr = v.mean_psnr;
        best_epoch = epoch;
        result.best_checkpoint = snapshot(epoch + 1);
        if (opt.out_dir) result.best_checkpoint->save(*opt.out_dir / "best.ckpt");
      }
      if (opt.on_epoch) opt.on_epoch(v);
      result.validation.push_back(std::move(v));
    }
  }
  result.final_checkpoint = snapshot(std::max(cfg.epochs, start_epoch));
  if (opt.out_dir) result.final_checkpoint.save(*opt.out_dir / "final.ckpt");
  return result;
}

inline FitResult fit(const TrainConfig& cfg, const CorpusManifest& corpus, const FitOptions& opt = {}) {
  return fit(cfg, load_dataset(corpus, "train"), load_dataset(corpus, "val"), opt);
}

}  // namespace siplkit
