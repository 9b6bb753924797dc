// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "siplkit/backbone.hpp"
#include "siplkit/image.hpp"
#include "siplkit/metrics.hpp"
#include "siplkit/privfusion.hpp"

namespace siplkit {

enum class Regime { baseline, pl, sipl };

inline std::string regime_name(Regime r) {
  switch (r) {
    case Regime::baseline: return "baseline";
    case Regime::pl: return "pl";
    case Regime::sipl: return "sipl";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "baseline") return Regime::baseline;
  if (s == "pl") return Regime::pl;
  if (s == "sipl") return Regime::sipl;
  throw ConfigError("unknown regime '" + s + "' (expected baseline, pl or sipl)");
}

struct ModelConfig {
  BackboneConfig backbone;
  Regime regime = Regime::sipl;
  int dict_entries = 64;
  int heads = 1;

  bool fusion_enabled() const { return regime == Regime::sipl; }
};

/// Backbone plus, in the sipl regime, a Privileged Dictionary at the bottleneck.
/// Vanilla-PL and Proxy-Fusion are exclusive: only sipl models own a dictionary.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    Rng backbone_rng(derive_seed(init_seed, "init.backbone"));
    backbone_ = Backbone<T>(cfg.backbone, params_, backbone_rng);
    if (cfg.fusion_enabled()) {
      Rng pd_rng(derive_seed(init_seed, "init.pd"));
      pd_.emplace(params_, cfg.dict_entries, cfg.backbone.bottleneck_channels(), cfg.heads, pd_rng);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const PrivilegedDictionary<T>* dictionary() const { return pd_ ? &*pd_ : nullptr; }
  bool has_fusion() const { return pd_.has_value(); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// Without PI (or without a dictionary) the bottleneck is bypassed; with PI
  /// it is proxy_fuse(PD, encode(I_d), encode(I_pi)). Returns the unclipped
  /// restoration I_d + residual.
  Var<T> forward(Tape<T>& tape, Var<T> degraded, std::optional<Var<T>> pi = std::nullopt,
                 AttentionProbs<T>* probs = nullptr) const {
    Encoded<T> enc = backbone_.encode(tape, degraded);
    FeatureMap<T> fused = enc.bottleneck;
    if (pi && pd_) {
      if (pi->shape() != degraded.shape()) throw ShapeMismatch("privileged image shape differs from the degraded image");
      const Encoded<T> priv = backbone_.encode(tape, *pi);
      fused.tokens = pd_->proxy_fuse(tape, enc.bottleneck.tokens, priv.bottleneck.tokens, probs);
    } else {
      fused.tokens = bypass(enc.bottleneck.tokens);
    }
    return backbone_.decode(tape, fused, enc.skips, degraded);
  }

  /// Training-time scalar blend of privileged features into the bottleneck.
  Var<T> forward_blend(Tape<T>& tape, Var<T> degraded, Var<T> pi, double alpha) const {
    Encoded<T> enc = backbone_.encode(tape, degraded);
    FeatureMap<T> fused = enc.bottleneck;
    if (alpha > 0.0) {
      const Encoded<T> priv = backbone_.encode(tape, pi);
      fused.tokens = blend_pl(enc.bottleneck.tokens, priv.bottleneck.tokens, alpha);
    }
    return backbone_.decode(tape, fused, enc.skips, degraded);
  }

  /// Gradient-free evaluation on a batch [N,H,W,C].
  Tensor<T> predict(const Tensor<T>& degraded, const Tensor<T>* pi = nullptr) const {
    Tape<T> tape(false);
    Var<T> d = tape.constant(degraded);
    std::optional<Var<T>> p;
    if (pi) p = tape.constant(*pi);
    return forward(tape, d, p).value();
  }

  std::int64_t backbone_param_count() const { return count_prefix("backbone."); }
  std::int64_t fusion_param_count() const { return count_prefix("pd."); }
  std::int64_t param_count() const { return backbone_param_count() + fusion_param_count(); }

 private:
  std::int64_t count_prefix(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params_) {
      if (name.starts_with(prefix)) n += static_cast<std::int64_t>(p.value.size());
    }
    return n;
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Backbone<T> backbone_;
  std::optional<PrivilegedDictionary<T>> pd_;
};

/// Copies same-named parameters across precisions.
template <typename T, typename U>
void copy_parameters(const ParamStore<U>& from, ParamStore<T>& to) {
  for (auto& [name, p] : to) {
    const auto it = from.find(name);
    if (it == from.end()) throw ConfigError("missing parameter " + name);
    if (it->second.value.shape() != p.value.shape()) throw ShapeMismatch("parameter " + name + " has a different shape");
    p.value = it->second.value.template cast<T>();
  }
}

enum class PiMode { none, self, gt };

inline std::string pi_mode_name(PiMode m) {
  switch (m) {
    case PiMode::none: return "none";
    case PiMode::self: return "self";
    case PiMode::gt: return "gt";
  }
  return "?";
}

inline PiMode parse_pi_mode(const std::string& s) {
  if (s == "none") return PiMode::none;
  if (s == "self") return PiMode::self;
  if (s == "gt") return PiMode::gt;
  throw ConfigError("unknown pi mode '" + s + "' (expected none, self or gt)");
}

struct InferenceConfig {
  int iters = 1;
  PiMode pi_mode = PiMode::self;
  bool clip_each_iter = true;
  /// Feed I_d as its own pseudo-PI for I^(0) instead of bypassing fusion.
  bool iter0_self_pi = false;

  void validate() const {
    if (iters < 0) throw ConfigError("iters must be non-negative");
  }
};

struct RestorationTrace {
  std::vector<Tensor<float>> outputs;  // I^(0) … I^(t_max), same rank as the input
  std::vector<double> per_iter_psnr;   // mean per-image PSNR (capped), when GT was given
};

namespace detail {

inline Tensor<float> as_batch(const Tensor<float>& t) {
  if (t.rank() == 4) return t;
  if (t.rank() == 3) return t.reshaped(Shape{1, t.dim(0), t.dim(1), t.dim(2)});
  throw ShapeError("expected H×W×C or N×H×W×C image, got " + to_string(t.shape()));
}

inline double mean_batch_psnr(const Tensor<float>& a, const Tensor<float>& b) {
  const auto ia = unstack_images(as_batch(a));
  const auto ib = unstack_images(as_batch(b));
  double s = 0.0;
  for (std::size_t i = 0; i < ia.size(); ++i) s += psnr_capped(clip01(ia[i]), ib[i]);
  return s / static_cast<double>(ia.size());
}

}  // namespace detail

/// I^(0) = F(I_d); then for t = 1..iters, I^(t) = F(I_d, PI_t) with PI_t the
/// previous output (self), the ground truth (gt), or nothing (none).
/// Iterates are plain tensors, so no gradient or hidden state crosses iterations.
inline RestorationTrace infer_iterative(const Model<float>& model, const Tensor<float>& degraded,
                                        const InferenceConfig& cfg, const Tensor<float>* ground_truth = nullptr) {
  cfg.validate();
  if (cfg.pi_mode == PiMode::gt && ground_truth == nullptr) {
    throw MissingGroundTruth("pi_mode=gt requires a ground-truth image");
  }
  const Tensor<float> d = detail::as_batch(degraded);
  std::optional<Tensor<float>> gt;
  if (ground_truth) {
    gt = detail::as_batch(*ground_truth);
    require_same_shape(*gt, d, "infer_iterative");
  }
  auto finish = [&](Tensor<float> out) {
    if (cfg.clip_each_iter) out = clip01(std::move(out));
    return out;
  };

  RestorationTrace trace;
  Tensor<float> current = finish(cfg.iter0_self_pi ? model.predict(d, &d) : model.predict(d));
  trace.outputs.push_back(current);
  for (int t = 1; t <= cfg.iters; ++t) {
    switch (cfg.pi_mode) {
      case PiMode::none: current = finish(model.predict(d)); break;
      case PiMode::self: current = finish(model.predict(d, &current)); break;
      case PiMode::gt: current = finish(model.predict(d, &*gt)); break;
    }
    trace.outputs.push_back(current);
  }
  if (gt) {
    for (const auto& o : trace.outputs) trace.per_iter_psnr.push_back(detail::mean_batch_psnr(o, *gt));
  }
  if (degraded.rank() == 3) {
    for (auto& o : trace.outputs) o = std::move(o).reshaped(degraded.shape());
  }
  return trace;
}

}  // namespace siplkit
