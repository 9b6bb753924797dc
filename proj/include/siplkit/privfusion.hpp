// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Privileged-feature mechanisms at the bottleneck:
//  * scalar blend (1−α)·F_d + α·F_PI with a decaying α schedule;
//  * Proxy Fusion: a learnable N×C dictionary first attends over privileged
//    tokens (distillation), then degraded tokens attend over the distilled
//    rows; the result is added back to F_d through an output projection.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "siplkit/autodiff.hpp"
#include "siplkit/ops.hpp"
#include "siplkit/rng.hpp"

namespace siplkit {

struct AlphaSchedule {
  enum class Decay { linear, cosine };
  double alpha0 = 0.9;
  Decay decay = Decay::linear;
  double end_fraction = 0.8;

  void validate() const {
    if (alpha0 < 0.0 || alpha0 > 1.0) throw ConfigError("alpha0 must lie in [0,1]");
    if (!(end_fraction > 0.0 && end_fraction <= 1.0)) throw ConfigError("end_fraction must lie in (0,1]");
  }
};

/// α for `epoch` of `total_epochs`; exactly 0 once epoch ≥ end_fraction·total.
inline double alpha_at(const AlphaSchedule& s, int epoch, int total_epochs) {
  const double end = s.end_fraction * total_epochs;
  if (end <= 0.0 || epoch >= end) return 0.0;
  const double progress = epoch / end;
  switch (s.decay) {
    case AlphaSchedule::Decay::linear: return s.alpha0 * std::max(0.0, 1.0 - progress);
    case AlphaSchedule::Decay::cosine: return s.alpha0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return 0.0;
}

template <typename T>
Tensor<T> blend_pl(const Tensor<T>& f_d, const Tensor<T>& f_pi, double alpha) {
  require_same_shape(f_d, f_pi, "blend_pl");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("blend_pl: alpha outside [0,1]");
  const T a = static_cast<T>(alpha);
  const T b = T(1) - a;
  Tensor<T> out(f_d.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = b * f_d[i] + a * f_pi[i];
  return out;
}

template <typename T>
Var<T> blend_pl(Var<T> f_d, Var<T> f_pi, double alpha) {
  require_same_shape(f_d.value(), f_pi.value(), "blend_pl");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("blend_pl: alpha outside [0,1]");
  return add(scale(f_d, T(1) - static_cast<T>(alpha)), scale(f_pi, static_cast<T>(alpha)));
}

template <typename T>
Var<T> bypass(Var<T> f_d) {
  return f_d;
}

/// Softmax probabilities captured from both attention stages.
template <typename T>
struct AttentionProbs {
  std::vector<Tensor<T>> distill;  // per head: [B?, N, L]
  std::vector<Tensor<T>> fuse;     // per head: [B?, L, N]
};

/// Scaled dot-product attention; heads split the channel axis evenly.
template <typename T>
Var<T> attend(Var<T> q, Var<T> k, Var<T> v, int heads, std::vector<Tensor<T>>* probs = nullptr) {
  const std::int64_t c = q.dim(-1);
  if (heads < 1 || c % heads != 0) throw ConfigError("attention heads must divide the channel count");
  const std::int64_t dh = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto one = [&](Var<T> qh, Var<T> kh, Var<T> vh) {
    Var<T> p = softmax(scale(matmul(qh, kh, true), sc));
    if (probs) probs->push_back(p.value());
    return matmul(p, vh);
  };
  if (heads == 1) return one(q, k, v);
  std::vector<Var<T>> outs;
  for (int h = 0; h < heads; ++h) {
    outs.push_back(one(slice_last(q, h * dh, dh), slice_last(k, h * dh, dh), slice_last(v, h * dh, dh)));
  }
  return concat_last(outs);
}

template <typename T>
class PrivilegedDictionary {
 public:
  PrivilegedDictionary() = default;

  /// PD ~ Normal(0, 0.02); projections ~ Normal(0, 1/sqrt(C)); Wo = 0.
  PrivilegedDictionary(ParamStore<T>& store, int entries, int channels, int heads, Rng& rng)
      : entries_(entries), channels_(channels), heads_(heads) {
    if (entries < 1 || channels < 1) throw ConfigError("dictionary needs N >= 1 and C >= 1");
    if (heads < 1 || channels % heads != 0) throw ConfigError("attention heads must divide C");
    auto reg = [&](const std::string& name, Shape shape, double sd) {
      Tensor<T> t(std::move(shape));
      if (sd > 0.0) {
        for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, sd));
      }
      auto& p = store["pd." + name];
      p = Parameter<T>{"pd." + name, std::move(t), {}, true};
      return &p;
    };
    const double proj_sd = 1.0 / std::sqrt(static_cast<double>(channels));
    matrix_ = reg("matrix", Shape{entries, channels}, 0.02);
    wq1_ = reg("wq1", Shape{channels, channels}, proj_sd);
    wk1_ = reg("wk1", Shape{channels, channels}, proj_sd);
    wv1_ = reg("wv1", Shape{channels, channels}, proj_sd);
    wq2_ = reg("wq2", Shape{channels, channels}, proj_sd);
    wk2_ = reg("wk2", Shape{channels, channels}, proj_sd);
    wv2_ = reg("wv2", Shape{channels, channels}, proj_sd);
    wo_ = reg("wo", Shape{channels, channels}, 0.0);
  }

  int entries() const { return entries_; }
  int channels() const { return channels_; }
  int heads() const { return heads_; }

  /// N·C + 7·C² (dictionary, six projections, output projection; no biases).
  static std::int64_t param_count(int entries, int channels) {
    return std::int64_t{entries} * channels + 7LL * channels * channels;
  }
  std::int64_t param_count() const { return param_count(entries_, channels_); }

  /// Both attention stages for one image with L tokens: matmuls at 2·m·k·n,
  /// softmax at 5 FLOPs per element.
  std::int64_t flops(std::int64_t tokens) const {
    const std::int64_t n = entries_, c = channels_, l = tokens;
    const std::int64_t stage1 = 2 * n * c * c + 2 * (2 * l * c * c) + 2 * n * c * l + 5 * n * l + 2 * n * l * c;
    const std::int64_t stage2 = 2 * l * c * c + 2 * (2 * n * c * c) + 2 * l * c * n + 5 * l * n + 2 * l * n * c;
    return stage1 + stage2 + 2 * l * c * c;
  }

  /// F'_PI = softmax((PD·Wq1)(F_PI·Wk1)ᵀ/√C)(F_PI·Wv1): one row per entry.
  Var<T> distill(Tape<T>& tape, Var<T> f_pi, AttentionProbs<T>* probs = nullptr) const {
    check_tokens(f_pi, "distill");
    Var<T> q = matmul(tape.param(*matrix_), tape.param(*wq1_));
    Var<T> k = linear(f_pi, tape.param(*wk1_));
    Var<T> v = linear(f_pi, tape.param(*wv1_));
    return attend(q, k, v, heads_, probs ? &probs->distill : nullptr);
  }

  /// F_d + softmax((F_d·Wq2)(F'·Wk2)ᵀ/√C)(F'·Wv2)·Wo with F' = distill(F_PI).
  Var<T> proxy_fuse(Tape<T>& tape, Var<T> f_d, Var<T> f_pi, AttentionProbs<T>* probs = nullptr) const {
    check_tokens(f_d, "proxy_fuse");
    if (f_d.shape().size() != f_pi.shape().size() || (f_d.shape().size() == 3 && f_d.dim(0) != f_pi.dim(0))) {
      throw ShapeMismatch("proxy_fuse: F_d " + to_string(f_d.shape()) + " and F_PI " + to_string(f_pi.shape()) +
                          " have different batch layout");
    }
    Var<T> distilled = distill(tape, f_pi, probs);
    Var<T> q = linear(f_d, tape.param(*wq2_));
    Var<T> k = linear(distilled, tape.param(*wk2_));
    Var<T> v = linear(distilled, tape.param(*wv2_));
    Var<T> attended = attend(q, k, v, heads_, probs ? &probs->fuse : nullptr);
    return add(f_d, linear(attended, tape.param(*wo_)));
  }

  Parameter<T>& matrix() const { return *matrix_; }
  Parameter<T>& wo() const { return *wo_; }

  std::vector<Parameter<T>*> parameters() const { return {matrix_, wq1_, wk1_, wv1_, wq2_, wk2_, wv2_, wo_}; }

 private:
  void check_tokens(Var<T> f, const char* what) const {
    const auto& s = f.shape();
    if ((s.size() != 2 && s.size() != 3) || s.back() != channels_) {
      throw ShapeMismatch(std::string(what) + ": expected [B?, L, " + std::to_string(channels_) + "] tokens, got " +
                          to_string(s));
    }
  }

  int entries_ = 0, channels_ = 0, heads_ = 1;
  Parameter<T>* matrix_ = nullptr;
  Parameter<T>* wq1_ = nullptr;
  Parameter<T>* wk1_ = nullptr;
  Parameter<T>* wv1_ = nullptr;
  Parameter<T>* wq2_ = nullptr;
  Parameter<T>* wk2_ = nullptr;
  Parameter<T>* wv2_ = nullptr;
  Parameter<T>* wo_ = nullptr;
};

}  // namespace siplkit
