// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace transunet;
using transunet::testing::random_tensor;

TEST(Tensor, RejectsZeroExtentAndSizeMismatch) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}, {}), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, ShapeMismatchIsAnError) {
  Tensor<double> a(Shape{2, 3}, std::vector<double>(6, 1.0)), b(Shape{3, 2}, std::vector<double>(6, 1.0));
  EXPECT_THROW(ops::add(a, b), DimensionError);
  EXPECT_THROW(ops::matmul(a, a), DimensionError);
}

TEST(Tape, SquareHasGradientTwoX) {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}));
  tape.backward(ops::sum(ops::square(x)));
  auto g = tape.grad(x);
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], -4.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
}

TEST(Tape, FanOutAccumulates) {
  // f = sum(x * x + 3 x) -> 2x + 3
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>(Shape{2}, {1.0, 4.0}));
  tape.backward(ops::sum(ops::add(ops::mul(x, x), ops::scale(x, 3.0))));
  auto g = tape.grad(x);
  EXPECT_DOUBLE_EQ(g[0], 5.0);
  EXPECT_DOUBLE_EQ(g[1], 11.0);
}

TEST(Tape, UnusedLeafHasZeroGradient) {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>::scalar(2.0));
  auto y = tape.watch(Tensor<double>::scalar(5.0));
  tape.backward(ops::square(x));
  EXPECT_DOUBLE_EQ(tape.grad(y)[0], 0.0);
}

TEST(Tape, MisuseIsAContractError) {
  Tape<double> a, b;
  auto x = a.watch(Tensor<double>::scalar(1.0));
  EXPECT_THROW(a.grad(x), ContractError);  // before backward
  auto y = b.watch(Tensor<double>::scalar(1.0));
  EXPECT_THROW(b.backward(ops::square(x)), ContractError);
  a.backward(ops::square(x));
  EXPECT_THROW(a.grad(y), ContractError);
}

TEST(Tape, DetachStopsGradient) {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>::scalar(3.0));
  auto y = ops::mul(x, x.detach());  // d/dx = x (only one factor tracked)
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 3.0);
}

TEST(Ops, MatmulMatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  auto c = ops::matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += a[i * 5 + k] * b[k * 3 + j];
      EXPECT_NEAR(c[i * 3 + j], s, 1e-12);
    }
}

TEST(Ops, SoftmaxRowsSumToOneAndStable) {
  Tensor<double> x(Shape{2, 3}, {1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0});
  auto s = ops::softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(s[r * 3] + s[r * 3 + 1] + s[r * 3 + 2], 1.0, 1e-15);
  EXPECT_NEAR(s[2], 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0)), 1e-15);
}

TEST(Ops, Conv3dMatchesDirectSum) {
  std::mt19937_64 rng(2);
  const std::size_t cin = 2, cout = 3, D = 4, H = 5, W = 3, k = 3;
  auto x = random_tensor({cin, D, H, W}, rng), w = random_tensor({cout, cin, k, k, k}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto y = ops::conv3d(x, w, stride, 1);
    const std::size_t od = (D + 2 - k) / stride + 1, oh = (H + 2 - k) / stride + 1, ow = (W + 2 - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{cout, od, oh, ow}));
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t yy = 0; yy < oh; ++yy)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            double s = 0.0;
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = 0; b < k; ++b)
                  for (std::size_t e = 0; e < k; ++e) {
                    const long iz = long(z * stride + a) - 1, iy = long(yy * stride + b) - 1,
                               ix = long(xx * stride + e) - 1;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= long(D) || iy >= long(H) || ix >= long(W)) continue;
                    s += w[(((o * cin + c) * k + a) * k + b) * k + e] * x[((c * D + iz) * H + iy) * W + ix];
                  }
            EXPECT_NEAR(y[((o * od + z) * oh + yy) * ow + xx], s, 1e-12);
          }
  }
}

TEST(Ops, AvgPoolAveragesBlocks) {
  std::vector<double> v(8, 0.0);
  v[5] = 1.0;
  auto p = ops::avg_pool3d(Tensor<double>(Shape{1, 2, 2, 2}, v), 1, 1, 1);
  EXPECT_DOUBLE_EQ(p[0], 0.125);
}

TEST(Ops, LinearResizeIsHalfPixel) {
  // Upsampling [0, 1] by 2 with half-pixel centers: 0, 0.25, 0.75, 1.
  auto r = ops::resize_axis(Tensor<double>(Shape{2}, {0.0, 1.0}), 0, 4, ops::ResizeMode::kLinear);
  EXPECT_DOUBLE_EQ(r[0], 0.0);
  EXPECT_DOUBLE_EQ(r[1], 0.25);
  EXPECT_DOUBLE_EQ(r[2], 0.75);
  EXPECT_DOUBLE_EQ(r[3], 1.0);
}

TEST(Ops, ThresholdTiesGoHigh) {
  auto t = ops::threshold(Tensor<double>(Shape{3}, {0.49, 0.5, 0.51}), 0.5);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 1.0);
  EXPECT_EQ(t[2], 1.0);
}

TEST(Ops, LayerNormHasZeroMeanUnitVariance) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({3, 8}, rng, -3, 3);
  auto y = ops::layer_norm(x, Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < 8; ++i) m += y[r * 8 + i];
    m /= 8;
    for (std::size_t i = 0; i < 8; ++i) s += (y[r * 8 + i] - m) * (y[r * 8 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s / 8, 1.0, 1e-4);  // eps = 1e-5 in the denominator
  }
}

TEST(GradCheck, CorruptedAdjointIsReported) {
  // sigmoid forward with a backward that is off by a factor of two.
  auto bad = [](const auto& xs) {
    using T = typename std::decay_t<decltype(xs[0])>::value_type;
    const auto& x = xs[0];
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    auto out = ops::make_result<T>(x.shape(), y, {x}, [x, y](std::span<const T> g, Tape<T>& tp) {
      std::vector<T> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = T(2) * g[i] * y[i] * (T(1) - y[i]);
      tp.accumulate(x, std::span<const T>(gx));
    });
    return ops::sum(out);
  };
  std::mt19937_64 rng(4);
  auto r = grad_check(bad, {random_tensor({5}, rng)});
  EXPECT_GT(r.max_rel_error, 1e-2);
  EXPECT_FALSE(r.passed(1e-4));
}

TEST(GradCheck, PrimitivesPassInBothPrecisions) {
  for (const auto& c : gradient_cases()) {
    if (c.composite) continue;
    const auto row = run_grad_case(c, 3);
    EXPECT_LT(row.err64, 1e-6) << c.name;
    EXPECT_LT(row.err32, 1e-4) << c.name;
  }
}

TEST(GradCheck, CompositesPass) {
  for (const auto& c : gradient_cases()) {
    if (!c.composite) continue;
    EXPECT_LT(run_grad_case(c, 2).err64, 1e-3) << c.name;
  }
}

TEST(FiniteChecks, FlagNonFiniteWhenEnabled) {
  finite_checks().store(true);
  EXPECT_THROW(ops::log(Tensor<double>::scalar(-1.0)), NumericError);
  finite_checks().store(false);
  EXPECT_NO_THROW(ops::log(Tensor<double>::scalar(-1.0)));
}
