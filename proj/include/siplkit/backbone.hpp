// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Small residual encoder–decoder. The encoder output at the coarsest scale is
// the injection point where privileged features are fused; the same encoder
// weights extract privileged features from a clean or pseudo-clean image.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "siplkit/autodiff.hpp"
#include "siplkit/ops.hpp"
#include "siplkit/rng.hpp"

namespace siplkit {

enum class Activation { gelu, relu };

struct BackboneConfig {
  int base_channels = 16;
  int n_scales = 3;
  int blocks_per_scale = 2;
  int img_channels = 3;
  Activation activation = Activation::gelu;

  int channels_at(int scale) const { return base_channels << scale; }
  int bottleneck_channels() const { return channels_at(n_scales - 1); }
  std::int64_t reduction() const { return std::int64_t{1} << (n_scales - 1); }

  void validate() const {
    if (base_channels < 1 || n_scales < 1 || blocks_per_scale < 0 || img_channels < 1) {
      throw ConfigError("invalid backbone config");
    }
  }
};

/// Bottleneck feature block, token-major: tokens is [B, L, C] with L = h·w.
template <typename T>
struct FeatureMap {
  Var<T> tokens;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t length() const { return h * w; }
  std::int64_t channels() const { return tokens.dim(-1); }
};

template <typename T>
using SkipStack = std::vector<Var<T>>;

template <typename T>
struct Encoded {
  FeatureMap<T> bottleneck;
  SkipStack<T> skips;
};

enum class Init { he, zero };

template <typename T>
struct Conv {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int k = 3, stride = 1, pad = 1, ci = 0, co = 0;

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> w = tape.param(*weight);
    Var<T> b = tape.param(*bias);
    return conv2d(x, w, &b, stride, pad);
  }

  static std::int64_t param_count(int k, int ci, int co) { return std::int64_t{k} * k * ci * co + co; }
  std::int64_t param_count() const { return param_count(k, ci, co); }

  /// Multiply-adds counted as 2 FLOPs; bias adds not counted.
  std::int64_t flops(std::int64_t ho, std::int64_t wo) const { return 2 * ho * wo * co * ci * std::int64_t{k} * k; }
};

template <typename T>
Conv<T> make_conv(ParamStore<T>& store, const std::string& name, int ci, int co, int stride, Init init, Rng& rng) {
  const int k = 3;
  Tensor<T> w(Shape{k, k, ci, co});
  if (init == Init::he) {
    const double sd = std::sqrt(2.0 / (k * k * ci));
    for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, sd));
  }
  auto& pw = store[name + ".weight"];
  pw = Parameter<T>{name + ".weight", std::move(w), {}, true};
  auto& pb = store[name + ".bias"];
  pb = Parameter<T>{name + ".bias", Tensor<T>(Shape{co}), {}, true};
  return Conv<T>{&pw, &pb, k, stride, 1, ci, co};
}

/// Channel LayerNorm with a learned per-channel scale (init 1) and shift (init 0).
template <typename T>
struct Norm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return layer_norm(x, tape.param(*gamma), tape.param(*beta)); }

  static std::int64_t param_count(int c) { return 2LL * c; }
};

template <typename T>
Norm<T> make_norm(ParamStore<T>& store, const std::string& name, int c) {
  auto& g = store[name + ".gamma"];
  g = Parameter<T>{name + ".gamma", Tensor<T>(Shape{c}, T(1)), {}, true};
  auto& b = store[name + ".beta"];
  b = Parameter<T>{name + ".beta", Tensor<T>(Shape{c}), {}, true};
  return Norm<T>{&g, &b};
}

template <typename T>
Var<T> activate(Var<T> x, Activation a) {
  return a == Activation::gelu ? gelu(x) : relu(x);
}

template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(const BackboneConfig& cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int n = cfg.n_scales;
    in_ = make_conv(store, "backbone.in", cfg.img_channels, cfg.channels_at(0), 1, Init::he, rng);
    enc_.resize(n);
    dec_.resize(n);
    for (int s = 0; s < n; ++s) {
      const int c = cfg.channels_at(s);
      for (int b = 0; b < cfg.blocks_per_scale; ++b) {
        const std::string p = "backbone.enc" + std::to_string(s) + ".block" + std::to_string(b);
        enc_[s].push_back(make_block(store, p, c, rng));
      }
      if (s + 1 < n) {
        down_.push_back(make_conv(store, "backbone.down" + std::to_string(s), c, cfg.channels_at(s + 1), 2, Init::he, rng));
      }
    }
    for (int s = n - 1; s >= 0; --s) {
      const int c = cfg.channels_at(s);
      if (s + 1 < n) {
        up_.insert(up_.begin(), make_conv(store, "backbone.up" + std::to_string(s), cfg.channels_at(s + 1), c, 1, Init::he, rng));
      }
      for (int b = 0; b < cfg.blocks_per_scale; ++b) {
        const std::string p = "backbone.dec" + std::to_string(s) + ".block" + std::to_string(b);
        dec_[s].push_back(make_block(store, p, c, rng));
      }
    }
    out_norm_ = make_norm(store, "backbone.out_norm", cfg.channels_at(0));
    out_ = make_conv(store, "backbone.out", cfg.channels_at(0), cfg.img_channels, 1, Init::zero, rng);
  }

  const BackboneConfig& config() const { return cfg_; }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[3] != cfg_.img_channels) {
      throw ShapeError("backbone input must be N×H×W×" + std::to_string(cfg_.img_channels) + ", got " + to_string(s));
    }
    if (s[1] % cfg_.reduction() != 0 || s[2] % cfg_.reduction() != 0) {
      throw ShapeError("image size " + std::to_string(s[1]) + "×" + std::to_string(s[2]) + " not divisible by " +
                       std::to_string(cfg_.reduction()));
    }
  }

  /// img [N,H,W,C] → bottleneck tokens [N, L, C_b] plus per-scale skips.
  Encoded<T> encode(Tape<T>& tape, Var<T> img) const {
    check_input(img.shape());
    Encoded<T> out;
    Var<T> x = in_(tape, img);
    for (int s = 0; s < cfg_.n_scales; ++s) {
      for (const auto& blk : enc_[s]) x = res_block(tape, blk, x);
      if (s + 1 < cfg_.n_scales) {
        out.skips.push_back(x);
        x = down_[s](tape, x);
      }
    }
    const auto& xs = x.shape();
    out.bottleneck = FeatureMap<T>{reshape(x, Shape{xs[0], xs[1] * xs[2], xs[3]}), xs[1], xs[2]};
    return out;
  }

  /// Returns input + predicted residual (unclipped).
  Var<T> decode(Tape<T>& tape, const FeatureMap<T>& bottleneck, const SkipStack<T>& skips, Var<T> input) const {
    const std::int64_t n = bottleneck.tokens.dim(0);
    if (static_cast<int>(skips.size()) != cfg_.n_scales - 1) throw ShapeError("decode: skip stack depth mismatch");
    Var<T> x = reshape(bottleneck.tokens, Shape{n, bottleneck.h, bottleneck.w, bottleneck.channels()});
    for (int s = cfg_.n_scales - 1; s >= 0; --s) {
      if (s + 1 < cfg_.n_scales) x = add(up_[s](tape, upsample2x(x)), skips[s]);
      for (const auto& blk : dec_[s]) x = res_block(tape, blk, x);
    }
    Var<T> residual = out_(tape, out_norm_(tape, x));
    if (residual.shape() != input.shape()) throw ShapeError("decode: output shape does not match input image");
    return add(input, residual);
  }

  /// Closed-form parameter count from the config alone.
  static std::int64_t param_count(const BackboneConfig& c) {
    std::int64_t total = Conv<T>::param_count(3, c.img_channels, c.channels_at(0));
    for (int s = 0; s < c.n_scales; ++s) {
      const int cs = c.channels_at(s);
      total += 2LL * c.blocks_per_scale * (2 * Conv<T>::param_count(3, cs, cs) + Norm<T>::param_count(cs));
      if (s + 1 < c.n_scales) {
        total += Conv<T>::param_count(3, c.channels_at(s), c.channels_at(s + 1));
        total += Conv<T>::param_count(3, c.channels_at(s + 1), c.channels_at(s));
      }
    }
    return total + Norm<T>::param_count(c.channels_at(0)) + Conv<T>::param_count(3, c.channels_at(0), c.img_channels);
  }

  /// Conv FLOPs of encode() for one H×W image; norms and elementwise ops are not counted.
  std::int64_t encoder_flops(std::int64_t h, std::int64_t w) const {
    std::int64_t f = in_.flops(h, w);
    for (int s = 0; s < cfg_.n_scales; ++s) {
      const std::int64_t hs = h >> s, ws = w >> s;
      for (const auto& blk : enc_[s]) f += blk.conv1.flops(hs, ws) + blk.conv2.flops(hs, ws);
      if (s + 1 < cfg_.n_scales) f += down_[s].flops(hs / 2, ws / 2);
    }
    return f;
  }

  /// Conv FLOPs of decode() for one H×W image.
  std::int64_t decoder_flops(std::int64_t h, std::int64_t w) const {
    std::int64_t f = 0;
    for (int s = 0; s < cfg_.n_scales; ++s) {
      const std::int64_t hs = h >> s, ws = w >> s;
      for (const auto& blk : dec_[s]) f += blk.conv1.flops(hs, ws) + blk.conv2.flops(hs, ws);
      if (s + 1 < cfg_.n_scales) f += up_[s].flops(hs, ws);
    }
    return f + out_.flops(h, w);
  }

  /// Every conv with the resolution of its output, in forward order.
  std::vector<std::pair<const Conv<T>*, std::int64_t>> layers() const {
    std::vector<std::pair<const Conv<T>*, std::int64_t>> out{{&in_, 0}};
    for (int s = 0; s < cfg_.n_scales; ++s) {
      for (const auto& blk : enc_[s]) {
        out.push_back({&blk.conv1, s});
        out.push_back({&blk.conv2, s});
      }
      if (s + 1 < cfg_.n_scales) out.push_back({&down_[s], s + 1});
    }
    for (int s = cfg_.n_scales - 1; s >= 0; --s) {
      if (s + 1 < cfg_.n_scales) out.push_back({&up_[s], s});
      for (const auto& blk : dec_[s]) {
        out.push_back({&blk.conv1, s});
        out.push_back({&blk.conv2, s});
      }
    }
    out.push_back({&out_, 0});
    return out;
  }

 private:
  struct Block {
    Norm<T> norm;
    Conv<T> conv1, conv2;
  };

  static Block make_block(ParamStore<T>& store, const std::string& prefix, int c, Rng& rng) {
    Block b;
    b.norm = make_norm(store, prefix + ".norm", c);
    b.conv1 = make_conv(store, prefix + ".conv1", c, c, 1, Init::he, rng);
    // Zero conv2 starts every block as the identity; escapes the early plateau sooner.
    b.conv2 = make_conv(store, prefix + ".conv2", c, c, 1, Init::zero, rng);
    return b;
  }

  // Pre-norm keeps the residual stream from compounding in scale across blocks.
  Var<T> res_block(Tape<T>& tape, const Block& blk, Var<T> x) const {
    return add(x, blk.conv2(tape, activate(blk.conv1(tape, blk.norm(tape, x)), cfg_.activation)));
  }

  BackboneConfig cfg_;
  Conv<T> in_;
  std::vector<std::vector<Block>> enc_;
  std::vector<Conv<T>> down_;
  std::vector<Conv<T>> up_;
  std::vector<std::vector<Block>> dec_;
  Norm<T> out_norm_;
  Conv<T> out_;
};

}  // namespace siplkit
