// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace transunet;
using transunet::testing::random_tensor;

TEST(Vit, SequentializeMatchesPatchOracle) {
  std::mt19937_64 rng(1);
  const std::size_t C = 2, P = 2;
  const Dims d{4, 2, 4};
  auto x = random_tensor({C, d.d, d.h, d.w}, rng);
  auto seq = sequentialize(x, P);
  ASSERT_EQ(seq.tokens.shape(), (Shape{4, P * P * P * C}));
  // token n = patch (pz, py, px) in lexicographic order; element (c, a, b, e).
  std::size_t n = 0;
  for (std::size_t pz = 0; pz < 2; ++pz)
    for (std::size_t py = 0; py < 1; ++py)
      for (std::size_t px = 0; px < 2; ++px, ++n) {
        std::size_t j = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < P; ++a)
            for (std::size_t b = 0; b < P; ++b)
              for (std::size_t e = 0; e < P; ++e, ++j)
                EXPECT_EQ(seq.tokens[n * 16 + j], x[c * d.voxels() + d.index(pz * P + a, py * P + b, px * P + e)]);
      }
}

TEST(Vit, UnsequentializeInvertsSequentialize) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({3, 4, 4, 2}, rng);
  for (std::size_t p : {1u, 2u}) {
    auto seq = sequentialize(x, p);
    auto back = unsequentialize(seq.tokens, 3, Dims{4, 4, 2}, p);
    EXPECT_EQ(back.vec(), x.vec());
  }
  EXPECT_THROW(sequentialize(x, 3), ConfigError);
}

TEST(Vit, MultiHeadAttentionMatchesLoopOracle) {
  std::mt19937_64 rng(3);
  VitConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.mlp_hidden = 6;
  cfg.in_channels = 3;
  cfg.grid = {1, 2, 2};
  Parameters<double> p;
  init_vit(cfg, p, rng);
  auto x = random_tensor({4, 4}, rng);
  std::vector<Tensor<double>> seen;
  AttentionObserver<double> obs = [&](std::string_view, const Tensor<double>& a) { seen.push_back(a); };
  auto y = multi_head_attention(p, 0, x, 2, &obs);
  ASSERT_EQ(seen.size(), 2u);

  auto proj = [&](const char* part) { return ops::matmul(x, p[vit_detail::layer(0, part) + std::string(".w")]); };
  auto q = proj("q"), k = proj("k"), v = proj("v");  // q/k/v carry no bias
  std::vector<double> cat(4 * 4, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> s(4);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < 2; ++e) {
          const std::size_t col = h * 2 + e;
          dot += q[i * 4 + col] * k[j * 4 + col];
        }
        s[j] = dot / std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (auto& t : s) z += (t = std::exp(t - mx));
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(seen[h][i * 4 + j], s[j] / z, 1e-12);
        for (std::size_t e = 0; e < 2; ++e)
          cat[i * 4 + h * 2 + e] += s[j] / z * v[j * 4 + h * 2 + e];
      }
    }
  auto expect = linear(p, vit_detail::layer(0, "out"), Tensor<double>(Shape{4, 4}, cat));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(Vit, EncoderPreservesTokenShapeAndAttentionIsStochastic) {
  std::mt19937_64 rng(4);
  VitConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.mlp_hidden = 16;
  cfg.in_channels = 4;
  cfg.grid = {2, 2, 2};
  Parameters<double> p;
  init_vit(cfg, p, rng);
  std::size_t maps = 0;
  AttentionObserver<double> obs = [&](std::string_view, const Tensor<double>& a) {
    ++maps;
    for (std::size_t r = 0; r < a.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < a.dim(1); ++c) s += a[r * a.dim(1) + c];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  };
  auto enc = vit_forward(cfg, p, random_tensor({4, 2, 2, 2}, rng), &obs);
  EXPECT_EQ(maps, 4u);
  EXPECT_EQ(enc.tokens.shape(), (Shape{8, 8}));
  EXPECT_EQ(enc.grid.shape(), (Shape{8, 2, 2, 2}));
}

TEST(Vit, ConfigErrors) {
  VitConfig cfg;
  cfg.dim = 10;
  cfg.heads = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.dim = 8;
  cfg.grid = {3, 4, 4};
  cfg.patch = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Vit, EncoderLayerGradient) {
  for (const auto& c : gradient_cases())
    if (c.name == "encoder_layer") EXPECT_LT(run_grad_case(c, 3).err64, 1e-3);
}
