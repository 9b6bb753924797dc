// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "siplkit/error.hpp"
#include "siplkit/image.hpp"

namespace siplkit {

inline constexpr double kPsnrCap = 100.0;

/// 10·log10(peak²/MSE); +inf when the images are identical.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// PSNR with the identical-image sentinel capped for aggregation.
template <typename T>
double psnr_capped(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  return std::min(psnr(a, b, peak), kPsnrCap);
}

struct SsimConstants {
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  int window = 11;
  double sigma = 1.5;
};

/// Mean SSIM over valid window positions, computed per channel and averaged.
inline double ssim(const Image& a, const Image& b, const SsimConstants& k = {}) {
  require_same_shape(a, b, "ssim");
  require_image(a, "ssim");
  const auto h = height(a), w = width(a), c = channels(a);
  const int win = k.window;
  if (std::min(h, w) < win) throw ImageTooSmall("ssim: image smaller than the " + std::to_string(win) + "px window");

  std::vector<double> g(static_cast<std::size_t>(win));
  double gs = 0.0;
  for (int i = 0; i < win; ++i) {
    const double x = i - (win - 1) / 2.0;
    g[i] = std::exp(-x * x / (2.0 * k.sigma * k.sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;

  const double c1 = (k.k1 * k.dynamic_range) * (k.k1 * k.dynamic_range);
  const double c2 = (k.k2 * k.dynamic_range) * (k.k2 * k.dynamic_range);
  const std::int64_t oh = h - win + 1, ow = w - win + 1;

  // Separable valid-mode Gaussian filter of one plane.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<std::size_t>(h * ow));
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < win; ++i) s += g[i] * src[y * w + x + i];
        tmp[y * ow + x] = s;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < win; ++i) s += g[i] * tmp[(y + i) * ow + x];
        out[y * ow + x] = s;
      }
    }
    return out;
  };

  double total = 0.0;
  const auto n = static_cast<std::size_t>(h * w);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = a[i * c + ch];
      pb[i] = b[i * c + ch];
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto ma = filter(pa), mb = filter(pb), maa = filter(paa), mbb = filter(pbb), mab = filter(pab);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = maa[i] - ma[i] * ma[i];
      const double vb = mbb[i] - mb[i] * mb[i];
      const double cov = mab[i] - ma[i] * mb[i];
      acc += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / static_cast<double>(c);
}

}  // namespace siplkit
