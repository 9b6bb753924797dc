// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "../support.hpp"

namespace siplkit {
namespace {

using testing::random_param;
using testing::random_shape;
using testing::random_tensor;

// ---------------------------------------------------------------------------
// Tensor and tape basics

TEST(Tensor, NumelMatchesShapeAndRejectsBadExtents) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.dim(-1), 4);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r[5], 6.0f);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
}

TEST(Tape, GradientHasValueShape) {
  auto p = random_param("p", Shape{3, 4}, 1);
  Tape<double> tape;
  Var<double> y = sum(mul(tape.param(p), tape.param(p)));
  tape.backward(y);
  EXPECT_EQ(p.grad.shape(), p.value.shape());
}

TEST(Tape, NoGradTapeRefusesBackward) {
  Tape<double> tape(false);
  Var<double> x = tape.constant(Tensor<double>::scalar(1.0));
  EXPECT_THROW(tape.backward(x), Error);
}

// ---------------------------------------------------------------------------
// grad_check on its own contract

TEST(GradCheck, SumOfSquares) {
  Parameter<double> x{"x", Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}), {}, true};
  const auto rep = grad_check([&](Tape<double>& t) { return sum(mul(t.param(x), t.param(x))); }, {&x}, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-8);
  x.zero_grad();
  Tape<double> tape;
  tape.backward(sum(mul(tape.param(x), tape.param(x))));
  EXPECT_DOUBLE_EQ(x.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad[1], 4.0);
}

TEST(GradCheck, SoftmaxSumIsConstant) {
  auto x = random_param("x", Shape{5}, 3, -2.0, 2.0);
  const auto rep = grad_check([&](Tape<double>& t) { return sum(softmax(t.param(x))); }, {&x}, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed);
  Tape<double> tape;
  tape.backward(sum(softmax(tape.param(x))));
  for (double g : x.grad.values()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
  auto x = random_param("x", Shape{2}, 1);
  auto f = [&](Tape<double>& t) { return sum(t.param(x)); };
  EXPECT_THROW(grad_check(f, {&x}, 1e-7, 1e-4), Error);
  EXPECT_THROW(grad_check(f, {&x}, 0.05, 1e-4), Error);
}

TEST(GradCheck, NonFiniteAnalyticGradientThrows) {
  Parameter<double> x{"x", Tensor<double>(Shape{1}, std::vector<double>{1.0}), {}, true};
  auto f = [&](Tape<double>& t) {
    Var<double> v = t.param(x);
    return t.record(v.value(), {v}, [v](Tape<double>& tp, const Tensor<double>&, const Tensor<double>&) {
      tp.grad_acc(v)[0] += std::numeric_limits<double>::quiet_NaN();
    });
  };
  EXPECT_THROW(grad_check(f, {&x}, 1e-5, 1e-4), NonFiniteGradient);
}

TEST(GradCheck, DetectsAWrongGradient) {
  Parameter<double> x{"x", Tensor<double>(Shape{1}, std::vector<double>{1.5}), {}, true};
  auto f = [&](Tape<double>& t) {
    Var<double> v = t.param(x);
    Tensor<double> out(Shape{1});
    out[0] = v.value()[0] * v.value()[0];
    return t.record(out, {v}, [v](Tape<double>& tp, const Tensor<double>& , const Tensor<double>& g) {
      tp.grad_acc(v)[0] += g[0] * 3.0 * tp.value(v)[0];  // should be 2x
    });
  };
  EXPECT_FALSE(grad_check(f, {&x}, 1e-5, 1e-4).passed);
}

// ---------------------------------------------------------------------------
// Every primitive on three random shapes

class PrimitiveGrad : public ::testing::TestWithParam<int> {
 protected:
  std::uint64_t seed() const { return 1000 + static_cast<std::uint64_t>(GetParam()); }
  Rng rng{derive_seed(77, "shapes", static_cast<std::uint64_t>(GetParam()))};

  /// Weighted sum makes the scalar objective sensitive to every output entry.
  static Var<double> reduce(Tape<double>& t, Var<double> y, std::uint64_t seed) {
    return sum(mul(y, t.constant(random_tensor(y.shape(), seed ^ 0x5a5a))));
  }

  void expect_pass(const Objective& f, const std::vector<Parameter<double>*>& ps) {
    const auto rep = grad_check(f, ps, 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed) << "max rel " << rep.max_rel_error << " at " << rep.worst_param << "[" << rep.worst_index << "]";
  }
};

TEST_P(PrimitiveGrad, AddSubMulScale) {
  const Shape s = random_shape(rng, 3, 4);
  auto a = random_param("a", s, seed()), b = random_param("b", s, seed() + 1);
  expect_pass([&](Tape<double>& t) { return reduce(t, add(t.param(a), t.param(b)), seed()); }, {&a, &b});
  expect_pass([&](Tape<double>& t) { return reduce(t, sub(t.param(a), t.param(b)), seed()); }, {&a, &b});
  expect_pass([&](Tape<double>& t) { return reduce(t, mul(t.param(a), t.param(b)), seed()); }, {&a, &b});
  expect_pass([&](Tape<double>& t) { return reduce(t, scale(t.param(a), -1.7), seed()); }, {&a});
}

TEST_P(PrimitiveGrad, AddBias) {
  const Shape s = random_shape(rng, 3, 4);
  auto x = random_param("x", s, seed()), b = random_param("b", Shape{s.back()}, seed() + 1);
  expect_pass([&](Tape<double>& t) { return reduce(t, add_bias(t.param(x), t.param(b)), seed()); }, {&x, &b});
}

TEST_P(PrimitiveGrad, Matmul) {
  const auto m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4), batch = 1 + rng.below(3);
  const auto M = static_cast<std::int64_t>(m), K = static_cast<std::int64_t>(k), N = static_cast<std::int64_t>(n),
             B = static_cast<std::int64_t>(batch);
  auto a = random_param("a", Shape{M, K}, seed()), b = random_param("b", Shape{K, N}, seed() + 1);
  auto bt = random_param("bt", Shape{N, K}, seed() + 2);
  auto a3 = random_param("a3", Shape{B, M, K}, seed() + 3), b3 = random_param("b3", Shape{B, K, N}, seed() + 4);
  expect_pass([&](Tape<double>& t) { return reduce(t, matmul(t.param(a), t.param(b)), seed()); }, {&a, &b});
  expect_pass([&](Tape<double>& t) { return reduce(t, matmul(t.param(a), t.param(bt), true), seed()); }, {&a, &bt});
  expect_pass([&](Tape<double>& t) { return reduce(t, matmul(t.param(a3), t.param(b3)), seed()); }, {&a3, &b3});
  expect_pass([&](Tape<double>& t) { return reduce(t, matmul(t.param(a3), t.param(b)), seed()); }, {&a3, &b});
  expect_pass([&](Tape<double>& t) { return reduce(t, matmul(t.param(a), t.param(b3)), seed()); }, {&a, &b3});
}

TEST_P(PrimitiveGrad, Conv2dStride1And2) {
  const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(2));
  const std::int64_t h = 3 + static_cast<std::int64_t>(rng.below(4)), w = 3 + static_cast<std::int64_t>(rng.below(4));
  const std::int64_t ci = 1 + static_cast<std::int64_t>(rng.below(3)), co = 1 + static_cast<std::int64_t>(rng.below(3));
  auto x = random_param("x", Shape{n, h, w, ci}, seed());
  auto wt = random_param("w", Shape{3, 3, ci, co}, seed() + 1);
  auto b = random_param("b", Shape{co}, seed() + 2);
  for (int stride : {1, 2}) {
    expect_pass(
        [&](Tape<double>& t) {
          Var<double> bv = t.param(b);
          return reduce(t, conv2d(t.param(x), t.param(wt), &bv, stride, 1), seed());
        },
        {&x, &wt, &b});
  }
}

TEST_P(PrimitiveGrad, UpsampleReshapeLinear) {
  const std::int64_t h = 1 + static_cast<std::int64_t>(rng.below(3)), w = 1 + static_cast<std::int64_t>(rng.below(3));
  const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(3));
  auto x = random_param("x", Shape{2, h, w, c}, seed());
  auto wl = random_param("w", Shape{c, 3}, seed() + 1);
  expect_pass([&](Tape<double>& t) { return reduce(t, upsample2x(t.param(x)), seed()); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, reshape(t.param(x), Shape{2, h * w, c}), seed()); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, linear(t.param(x), t.param(wl)), seed()); }, {&x, &wl});
}

TEST_P(PrimitiveGrad, SoftmaxLayerNorm) {
  const Shape s = random_shape(rng, 2, 5);
  auto x = random_param("x", s, seed(), -2.0, 2.0);
  expect_pass([&](Tape<double>& t) { return reduce(t, softmax(t.param(x)), seed()); }, {&x});
  Shape wide = s;
  wide.back() += 1;  // layer norm over a single channel is degenerate
  auto xl = random_param("xl", wide, seed() + 3, -2.0, 2.0);
  auto gl = random_param("gl", Shape{wide.back()}, seed() + 4), bl = random_param("bl", Shape{wide.back()}, seed() + 5);
  expect_pass([&](Tape<double>& t) { return reduce(t, layer_norm(t.param(xl), t.param(gl), t.param(bl)), seed()); },
              {&xl, &gl, &bl});
}

TEST_P(PrimitiveGrad, Nonlinearities) {
  const Shape s = random_shape(rng, 3, 4);
  auto x = random_param("x", s, seed(), -2.0, 2.0);
  // Keep entries away from the kinks of relu/abs, where central differences straddle.
  for (auto& v : x.value.values()) {
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  }
  expect_pass([&](Tape<double>& t) { return reduce(t, gelu(t.param(x)), seed()); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, relu(t.param(x)), seed()); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, abs(t.param(x)), seed()); }, {&x});
}

TEST_P(PrimitiveGrad, ReductionsSliceConcatL1) {
  const Shape s = random_shape(rng, 2, 4);
  Shape wide = s;
  wide.back() += 2;
  auto x = random_param("x", wide, seed());
  auto y = random_param("y", wide, seed() + 1);
  expect_pass([&](Tape<double>& t) { return mean(t.param(x)); }, {&x});
  expect_pass([&](Tape<double>& t) { return sum(t.param(x)); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, slice_last(t.param(x), 1, wide.back() - 1), seed()); }, {&x});
  expect_pass([&](Tape<double>& t) { return reduce(t, concat_last(std::vector<Var<double>>{t.param(x), t.param(y)}), seed()); }, {&x, &y});
  for (std::size_t i = 0; i < x.value.size(); ++i) {
    if (std::abs(x.value[i] - y.value[i]) < 0.05) x.value[i] += 0.2;
  }
  expect_pass([&](Tape<double>& t) { return l1_loss(t.param(x), t.param(y)); }, {&x, &y});
}

INSTANTIATE_TEST_SUITE_P(ThreeShapes, PrimitiveGrad, ::testing::Values(0, 1, 2));

// ---------------------------------------------------------------------------
// Forward oracles

TEST(Conv2d, MatchesDirectLoops) {
  for (int stride : {1, 2}) {
    const auto x = random_tensor(Shape{2, 7, 6, 3}, 10);
    const auto w = random_tensor(Shape{3, 3, 3, 4}, 11);
    const auto b = random_tensor(Shape{4}, 12);
    Tape<double> tape(false);
    Var<double> bv = tape.constant(b);
    const auto y = conv2d(tape.constant(x), tape.constant(w), &bv, stride, 1).value();
    const std::int64_t ho = (7 + 2 - 3) / stride + 1, wo = (6 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, ho, wo, 4}));
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox)
          for (std::int64_t o = 0; o < 4; ++o) {
            double acc = b[o];
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const std::int64_t iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                for (int c = 0; c < 3; ++c) acc += x[((n * 7 + iy) * 6 + ix) * 3 + c] * w[((ky * 3 + kx) * 3 + c) * 4 + o];
              }
            EXPECT_NEAR(y[((n * ho + oy) * wo + ox) * 4 + o], acc, 1e-12);
          }
  }
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = random_tensor(Shape{3, 5}, 1), b = random_tensor(Shape{5, 4}, 2);
  Tape<double> tape(false);
  const auto c = matmul(tape.constant(a), tape.constant(b)).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += a[i * 5 + k] * b[k * 4 + j];
      EXPECT_NEAR(c[i * 4 + j], s, 1e-12);
    }
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s = random_shape(rng, 3, 9);
    auto x = random_tensor<float>(s, 100 + trial, -30.0, 30.0);
    Tape<float> tape(false);
    const auto p = softmax(tape.constant(x)).value();
    const auto cols = s.back();
    for (std::size_t r = 0; r < p.size() / cols; ++r) {
      double total = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const float v = p[r * cols + c];
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor<float> x(Shape{1, 3}, std::vector<float>{1000.0f, 999.0f, -1000.0f});
  Tape<float> tape(false);
  EXPECT_TRUE(softmax(tape.constant(x)).value().all_finite());
}

TEST(LayerNorm, NormalizesChannels) {
  const auto x = random_tensor(Shape{4, 6}, 9, -3.0, 5.0);
  Tape<double> tape(false);
  const auto y = layer_norm(tape.constant(x), tape.constant(Tensor<double>(Shape{6}, 1.0)),
                            tape.constant(Tensor<double>(Shape{6}, 0.0)))
                     .value();
  for (int r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (int c = 0; c < 6; ++c) m += y[r * 6 + c];
    m /= 6;
    for (int c = 0; c < 6; ++c) v += (y[r * 6 + c] - m) * (y[r * 6 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v / 6, 1.0, 1e-3);
  }
}

TEST(Ops, ShapeMismatchIsReported) {
  Tape<float> tape(false);
  Var<float> a = tape.constant(Tensor<float>(Shape{2, 3}));
  Var<float> b = tape.constant(Tensor<float>(Shape{3, 2}));
  EXPECT_THROW(add(a, b), ShapeMismatch);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Determinism, IdenticalCallSequencesAreBitwiseEqual) {
  auto run = [] {
    const auto x = random_tensor<float>(Shape{2, 8, 8, 3}, 4);
    const auto w = random_tensor<float>(Shape{3, 3, 3, 5}, 5);
    Tape<float> tape(false);
    return gelu(conv2d(tape.constant(x), tape.constant(w), static_cast<const Var<float>*>(nullptr), 2, 1)).value();
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Rng, DerivedSeedsSeparateStreams) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_EQ(derive_seed(3, "x", 4, 5), derive_seed(3, "x", 4, 5));
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(7);
    EXPECT_LT(v, 7u);
  }
}

}  // namespace
}  // namespace siplkit
