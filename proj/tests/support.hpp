// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the test binaries: seeded generators and small models.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "siplkit/siplkit.hpp"

namespace siplkit::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T = double>
Parameter<T> random_param(const std::string& name, const Shape& shape, std::uint64_t seed, double lo = -1.0,
                          double hi = 1.0) {
  return Parameter<T>{name, random_tensor<T>(shape, seed, lo, hi), {}, true};
}

/// Random shape of the given rank with extents in [1, max_extent].
inline Shape random_shape(Rng& rng, int rank, int max_extent) {
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_extent))));
  return s;
}

/// Small backbone used wherever tests need a real model quickly.
inline BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.base_channels = 4;
  c.n_scales = 2;
  c.blocks_per_scale = 1;
  return c;
}

inline ModelConfig tiny_model(Regime regime = Regime::sipl, int entries = 4) {
  return ModelConfig{tiny_backbone(), regime, entries, 1};
}

/// Overwrites every parameter (including zero-initialized ones) with small
/// random values so no pathway is trivially zero. Norm gains stay near 1.
template <typename T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double scale = 0.3) {
  std::uint64_t k = 0;
  for (auto& [name, p] : store) {
    Rng rng(derive_seed(seed, name, k++));
    const double centre = name.ends_with(".gamma") ? 1.0 : 0.0;
    for (auto& v : p.value.values()) v = static_cast<T>(centre + rng.uniform(-scale, scale));
  }
}

inline Image random_image(std::uint64_t seed, std::int64_t h, std::int64_t w) {
  return random_tensor<float>(Shape{h, w, 3}, seed, 0.0, 1.0);
}

}  // namespace siplkit::testing
