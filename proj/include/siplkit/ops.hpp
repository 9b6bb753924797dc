// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Each op computes its forward value eagerly and
// registers an analytic backward on the tape.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "siplkit/autodiff.hpp"

namespace siplkit {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C(m×n) = op(A)·op(B), or += when `accumulate`. A is stored m×k (k×m if
/// trans_a), B is stored k×n (n×k if trans_b), all row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using CMap = Eigen::Map<const RowMat<T>>;
  CMap am(a, trans_a ? k : m, trans_a ? m : k);
  CMap bm(b, trans_b ? n : k, trans_b ? k : n);
  Eigen::Map<RowMat<T>> cm(c, m, n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) run(am, bm);
  if (!trans_a && trans_b) run(am, bm.transpose());
  if (trans_a && !trans_b) run(am.transpose(), bm);
  if (trans_a && trans_b) run(am.transpose(), bm.transpose());
}

struct ConvGeom {
  std::int64_t n, h, w, ci, co, k, stride, pad, ho, wo;
};

/// Rows are output pixels (n, oy, ox); columns are (ky, kx, ci). For a fixed
/// (ky), kx taps are adjacent input pixels, so copies run over k·ci elements at once.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t kcols = g.k * g.k * g.ci;
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        T* row = col + ((n * g.ho + oy) * g.wo + ox) * kcols;
        const std::int64_t ix0 = ox * g.stride - g.pad;
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + ky * g.k * g.ci;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.k * g.ci, T(0));
            continue;
          }
          const T* src_row = x + (n * g.h + iy) * g.w * g.ci;
          const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
          const std::int64_t kx_hi = std::min<std::int64_t>(g.k, g.w - ix0);
          std::fill(dst, dst + kx_lo * g.ci, T(0));
          if (kx_hi > kx_lo) {
            std::copy(src_row + (ix0 + kx_lo) * g.ci, src_row + (ix0 + kx_hi) * g.ci, dst + kx_lo * g.ci);
          }
          std::fill(dst + std::max(kx_hi, kx_lo) * g.ci, dst + g.k * g.ci, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const std::int64_t kcols = g.k * g.k * g.ci;
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        const T* row = col + ((n * g.ho + oy) * g.wo + ox) * kcols;
        const std::int64_t ix0 = ox * g.stride - g.pad;
        const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
        const std::int64_t kx_hi = std::min<std::int64_t>(g.k, g.w - ix0);
        if (kx_hi <= kx_lo) continue;
        const std::int64_t len = (kx_hi - kx_lo) * g.ci;
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + (ky * g.k + kx_lo) * g.ci;
          T* dst = dx + ((n * g.h + iy) * g.w + ix0 + kx_lo) * g.ci;
          for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

/// rows×c matrix plus a length-c row vector.
template <typename T>
void add_row_vector(T* data, std::size_t rows, std::size_t c, const T* v) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* d = data + r * c;
    for (std::size_t i = 0; i < c; ++i) d[i] += v[i];
  }
}

/// Column sums of a rows×c matrix accumulated into `out`.
template <typename T>
void add_column_sums(const T* data, std::size_t rows, std::size_t c, T* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* d = data + r * c;
    for (std::size_t i = 0; i < c; ++i) out[i] += d[i];
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename F>
auto unary_map(const auto& x, F f) {
  auto out = x;
  for (auto& v : out.values()) v = f(v);
  return out;
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  detail::accumulate(out, b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    if (t.requires_grad(a)) detail::accumulate(t.grad_acc(a), g);
    if (t.requires_grad(b)) detail::accumulate(t.grad_acc(b), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    if (t.requires_grad(a)) detail::accumulate(t.grad_acc(a), g);
    if (t.requires_grad(b)) {
      auto& gb = t.grad_acc(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_acc(a);
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_acc(b);
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = detail::unary_map(a.value(), [s](T v) { return v * s; });
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    auto& ga = t.grad_acc(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
  });
}

/// x[..., C] + bias[C]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const auto c = static_cast<std::size_t>(x.dim(-1));
  if (bias.value().size() != c) throw ShapeMismatch("add_bias: bias length does not match last axis");
  Tensor<T> out = x.value();
  const auto& bv = bias.value();
  detail::add_row_vector(out.data(), out.size() / c, c, bv.data());
  return x.tape->record(std::move(out), {x, bias},
                        [x, bias, c](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                          if (t.requires_grad(x)) detail::accumulate(t.grad_acc(x), g);
                          if (t.requires_grad(bias)) {
                            auto& gb = t.grad_acc(bias);
                            detail::add_column_sums(g.data(), g.size() / c, c, gb.data());
                          }
                        });
}

/// a[B?, m, k] · b[B?, k, n] (b[B?, n, k] when trans_b). A rank-2 operand is
/// broadcast over the batch of the other.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_b = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || as.size() > 3 || bs.size() < 2 || bs.size() > 3) {
    throw ShapeError("matmul: operands must be rank 2 or 3, got " + to_string(as) + " and " +
                     to_string(bs));
  }
  const std::int64_t ba = as.size() == 3 ? as[0] : 1;
  const std::int64_t bb = bs.size() == 3 ? bs[0] : 1;
  const bool batched = as.size() == 3 || bs.size() == 3;
  if (as.size() == 3 && bs.size() == 3 && ba != bb) throw ShapeMismatch("matmul: batch extents differ");
  const std::int64_t batch = std::max(ba, bb);
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as[as.size() - 1];
  const std::int64_t kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::int64_t n = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (k != kb) {
    throw ShapeMismatch("matmul: inner extents differ for " + to_string(as) + " and " + to_string(bs) +
                        (trans_b ? " (trans_b)" : ""));
  }
  Shape os = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(os);
  const std::int64_t sa = ba == 1 ? 0 : m * k;
  const std::int64_t sb = bb == 1 ? 0 : k * n;
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::gemm<T>(false, trans_b, m, n, k, a.value().data() + i * sa, b.value().data() + i * sb,
                    out.data() + i * m * n, false);
  }
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, trans_b, batch, m, n, k, sa, sb](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        if (t.requires_grad(a)) {
          auto& ga = t.grad_acc(a);
          const T* bv = t.value(b).data();
          for (std::int64_t i = 0; i < batch; ++i) {
            // dA = dC · op(B)^T
            detail::gemm<T>(false, !trans_b, m, k, n, g.data() + i * m * n, bv + i * sb, ga.data() + i * sa,
                            true);
          }
        }
        if (t.requires_grad(b)) {
          auto& gb = t.grad_acc(b);
          const T* av = t.value(a).data();
          for (std::int64_t i = 0; i < batch; ++i) {
            if (trans_b) {
              detail::gemm<T>(true, false, n, k, m, g.data() + i * m * n, av + i * sa, gb.data() + i * sb, true);
            } else {
              detail::gemm<T>(true, false, k, n, m, av + i * sa, g.data() + i * m * n, gb.data() + i * sb, true);
            }
          }
        }
      });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    detail::accumulate(t.grad_acc(x), g);
  });
}

/// x[..., Cin] · w[Cin, Cout]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  Shape s = x.shape();
  const std::int64_t cin = s.back();
  const auto rows = static_cast<std::int64_t>(x.value().size()) / cin;
  Var<T> y = matmul(reshape(x, Shape{rows, cin}), w);
  s.back() = w.dim(1);
  return reshape(y, s);
}

/// x[N,H,W,Ci] conv w[k,k,Ci,Co] (+ bias[Co]) with zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, const Var<T>* bias, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[0] != ws[1] || ws[2] != xs[3]) {
    throw ShapeError("conv2d: incompatible input " + to_string(xs) + " and kernel " + to_string(ws));
  }
  detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[3], ws[0], stride, pad, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + to_string(xs));
  const std::int64_t rows = g.n * g.ho * g.wo;
  const std::int64_t kcols = g.k * g.k * g.ci;
  std::vector<T> col(static_cast<std::size_t>(rows * kcols));
  detail::im2col(x.value().data(), g, col.data());
  Tensor<T> out(Shape{g.n, g.ho, g.wo, g.co});
  detail::gemm<T>(false, false, rows, g.co, kcols, col.data(), w.value().data(), out.data(), false);
  std::vector<Var<T>> inputs{x, w};
  Var<T> b{};
  const bool has_bias = bias != nullptr;
  if (has_bias) {
    b = *bias;
    if (b.value().size() != static_cast<std::size_t>(g.co)) throw ShapeMismatch("conv2d: bias length");
    inputs.push_back(b);
    const auto& bv = b.value();
    detail::add_row_vector(out.data(), static_cast<std::size_t>(rows), static_cast<std::size_t>(g.co), bv.data());
  }
  return x.tape->record(std::move(out), inputs,
                        [x, w, b, has_bias, g, rows, kcols](Tape<T>& t, const Tensor<T>&, const Tensor<T>& gy) {
                          const bool need_x = t.requires_grad(x);
                          const bool need_w = t.requires_grad(w);
                          if (need_w) {
                            std::vector<T> col(static_cast<std::size_t>(rows * kcols));
                            detail::im2col(t.value(x).data(), g, col.data());
                            detail::gemm<T>(true, false, kcols, g.co, rows, col.data(), gy.data(),
                                            t.grad_acc(w).data(), true);
                          }
                          if (need_x) {
                            std::vector<T> dcol(static_cast<std::size_t>(rows * kcols));
                            detail::gemm<T>(false, true, rows, kcols, g.co, gy.data(), t.value(w).data(),
                                            dcol.data(), false);
                            detail::col2im_add(dcol.data(), g, t.grad_acc(x).data());
                          }
                          if (has_bias && t.requires_grad(b)) {
                            auto& gb = t.grad_acc(b);
                            detail::add_column_sums(gy.data(), static_cast<std::size_t>(rows), static_cast<std::size_t>(g.co), gb.data());
                          }
                        });
}

/// Nearest-neighbour ×2 upsampling of x[N,H,W,C].
template <typename T>
Var<T> upsample2x(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample2x: expected rank-4 input");
  const std::int64_t n = s[0], h = s[1], w = s[2], c = s[3];
  Tensor<T> out(Shape{n, 2 * h, 2 * w, c});
  const T* xv = x.value().data();
  T* ov = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
        const T* src = xv + ((i * h + y / 2) * w + xx / 2) * c;
        std::copy(src, src + c, ov + ((i * 2 * h + y) * 2 * w + xx) * c);
      }
    }
  }
  return x.tape->record(std::move(out), {x}, [x, n, h, w, c](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    T* gx = t.grad_acc(x).data();
    const T* gv = g.data();
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t y = 0; y < 2 * h; ++y) {
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
          const T* src = gv + ((i * 2 * h + y) * 2 * w + xx) * c;
          T* dst = gx + ((i * h + y / 2) * w + xx / 2) * c;
          for (std::int64_t k = 0; k < c; ++k) dst[k] += src[k];
        }
      }
    }
  });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> x) {
  const auto c = static_cast<std::size_t>(x.dim(-1));
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < out.size() / c; ++r) {
    T* row = out.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T sum = 0;
    for (std::size_t i = 0; i < c; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    for (std::size_t i = 0; i < c; ++i) row[i] /= sum;
  }
  return x.tape->record(std::move(out), {x}, [x, c](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
    auto& gx = t.grad_acc(x);
    for (std::size_t r = 0; r < y.size() / c; ++r) {
      const T* yr = y.data() + r * c;
      const T* gr = g.data() + r * c;
      T dot = 0;
      for (std::size_t i = 0; i < c; ++i) dot += yr[i] * gr[i];
      T* dst = gx.data() + r * c;
      for (std::size_t i = 0; i < c; ++i) dst[i] += yr[i] * (gr[i] - dot);
    }
  });
}

/// Layer normalization over the last (channel) axis with affine gamma/beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto c = static_cast<std::size_t>(x.dim(-1));
  if (gamma.value().size() != c || beta.value().size() != c) throw ShapeMismatch("layer_norm: affine length");
  const std::size_t rows = x.value().size() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().size());
  std::vector<T> inv_std(rows);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i) {
      xhat[r * c + i] = (xr[i] - mean) * inv_std[r];
      out[r * c + i] = gv[i] * xhat[r * c + i] + bv[i];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const auto& gv = t.value(gamma);
        if (t.requires_grad(gamma)) {
          auto& gg = t.grad_acc(gamma);
          for (std::size_t i = 0; i < rows * c; ++i) gg[i % c] += g[i] * xhat[i];
        }
        if (t.requires_grad(beta)) {
          auto& gb = t.grad_acc(beta);
          for (std::size_t i = 0; i < rows * c; ++i) gb[i % c] += g[i];
        }
        if (t.requires_grad(x)) {
          auto& gx = t.grad_acc(x);
          std::vector<T> dxhat(c);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t i = 0; i < c; ++i) {
              dxhat[i] = g[r * c + i] * gv[i];
              mean_d += dxhat[i];
              mean_dx += dxhat[i] * xhat[r * c + i];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            for (std::size_t i = 0; i < c; ++i) {
              gx[r * c + i] += inv_std[r] * (dxhat[i] - mean_d - xhat[r * c + i] * mean_dx);
            }
          }
        }
      });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  Tensor<T> out = detail::unary_map(x.value(), [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); });
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    const auto& xv = t.value(x);
    auto& gx = t.grad_acc(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = detail::unary_map(x.value(), [](T v) { return v > T(0) ? v : T(0); });
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const auto& xv = t.value(x);
    auto& gx = t.grad_acc(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> abs(Var<T> x) {
  Tensor<T> out = detail::unary_map(x.value(), [](T v) { return std::abs(v); });
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const auto& xv = t.value(x);
    auto& gx = t.grad_acc(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] > T(0)) {
        gx[i] += g[i];
      } else if (xv[i] < T(0)) {
        gx[i] -= g[i];
      }
    }
  });
}

/// Mean over all elements; returns a shape-[1] tensor.
template <typename T>
Var<T> mean(Var<T> x) {
  const auto& xv = x.value();
  // Accumulate in double so float reductions over large images stay accurate.
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]);
  const std::size_t n = xv.size();
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n)));
  return x.tape->record(std::move(out), {x}, [x, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    auto& gx = t.grad_acc(x);
    const T d = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d;
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]);
  return x.tape->record(Tensor<T>::scalar(static_cast<T>(s)), {x},
                        [x](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                          auto& gx = t.grad_acc(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
                        });
}

/// x[..., begin:begin+len] along the last axis.
template <typename T>
Var<T> slice_last(Var<T> x, std::int64_t begin, std::int64_t len) {
  const std::int64_t c = x.dim(-1);
  if (begin < 0 || len <= 0 || begin + len > c) throw ShapeError("slice_last: range out of bounds");
  Shape s = x.shape();
  s.back() = len;
  Tensor<T> out(s);
  const std::size_t rows = x.value().size() / static_cast<std::size_t>(c);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(xv + r * c + begin, xv + r * c + begin + len, out.data() + r * len);
  }
  return x.tape->record(std::move(out), {x}, [x, begin, len, c, rows](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    T* gx = t.grad_acc(x).data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::int64_t i = 0; i < len; ++i) gx[r * c + begin + i] += g[r * len + i];
    }
  });
}

template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Shape s = parts.front().shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin(), ps.end() - 1, s.begin())) {
      throw ShapeMismatch("concat_last: leading extents differ");
    }
    total += ps.back();
  }
  const std::size_t rows = parts.front().value().size() / static_cast<std::size_t>(s.back());
  s.back() = total;
  Tensor<T> out(s);
  std::int64_t off = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    const std::int64_t c = p.dim(-1);
    offsets.push_back(off);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p.value().data() + r * c, p.value().data() + (r + 1) * c, out.data() + r * total + off);
    }
    off += c;
  }
  return parts.front().tape->record(
      std::move(out), parts, [parts, offsets, total, rows](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!t.requires_grad(parts[k])) continue;
          const std::int64_t c = t.value(parts[k]).shape().back();
          T* gp = t.grad_acc(parts[k]).data();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::int64_t i = 0; i < c; ++i) gp[r * c + i] += g[r * total + offsets[k] + i];
          }
        }
      });
}

/// Mean absolute error between two same-shape tensors.
template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target) {
  return mean(abs(sub(pred, target)));
}

}  // namespace siplkit
