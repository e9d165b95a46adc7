// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace transunet;
using transunet::testing::random_tensor;

TEST(Hungarian, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cols = 1 + rng() % 7, rows = rng() % (std::min<std::size_t>(cols, 5) + 1);
    std::vector<double> c(rows * cols);
    const bool integer = trial % 2 == 0;  // integer costs force ties
    for (auto& x : c) x = integer ? double(rng() % 4) : std::uniform_real_distribution<double>(-2, 3)(rng);
    const auto a = hungarian(c, rows, cols);
    double total = 0.0;
    std::vector<int> used(cols, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      total += c[r * cols + a.query_of_segment[r]];
      EXPECT_EQ(used[a.query_of_segment[r]]++, 0);
      EXPECT_EQ(a.segment_of_query[a.query_of_segment[r]], long(r));
    }
    EXPECT_NEAR(total, oracle::assignment_cost(c, rows, cols), 1e-12);
    EXPECT_NEAR(a.total_cost, total, 1e-12);
  }
}

TEST(Hungarian, Contracts) {
  EXPECT_THROW(hungarian({1, 2, 3}, 2, 2), DimensionError);
  EXPECT_THROW(hungarian({1, 2}, 2, 1), InputError);
  EXPECT_THROW(hungarian({1, NAN}, 1, 2), InputError);
  const auto empty = hungarian({}, 0, 3);
  EXPECT_EQ(empty.segment_of_query, (std::vector<long>{-1, -1, -1}));
}

TEST(Losses, DiceLossHandValue) {
  Tensor<double> p(Shape{1, 4}, {0.5, 1.0, 0.0, 0.25}), g(Shape{1, 4}, {1, 1, 0, 0});
  // 1 - (2 * 1.5 + 1) / (1.75 + 2 + 1)
  EXPECT_NEAR(dice_loss(p, g).item(), 1.0 - 4.0 / 4.75, 1e-15);
}

TEST(Losses, BceHandValueAndClamp) {
  Tensor<double> p(Shape{1, 2}, {0.8, 0.3}), g(Shape{1, 2}, {1, 0});
  EXPECT_NEAR(bce_loss(p, g).item(), -(std::log(0.8) + std::log(0.7)) / 2, 1e-15);
  Tensor<double> hard(Shape{1, 1}, {0.0}), one(Shape{1, 1}, {1.0});
  EXPECT_NEAR(bce_loss(hard, one).item(), -std::log(kProbClamp), 1e-9);
}

TEST(Losses, ClsLossIsWeightedMean) {
  Tensor<double> logits(Shape{2, 2}, {1.0, 0.0, 0.0, 2.0});
  const double l0 = std::log(1 + std::exp(-1.0)), l1 = std::log(1 + std::exp(-2.0));
  EXPECT_NEAR(cls_loss(logits, {0, 1}, {1.0, 0.1}).item(), (l0 + 0.1 * l1) / 1.1, 1e-15);
}

TEST(Losses, MatchCostEqualsPairLoss) {
  std::mt19937_64 rng(2);
  LabelMap lm({2, 2, 3});
  for (auto& l : lm.labels) l = rng() % 3;
  lm.labels[0] = 1;
  lm.labels[1] = 2;
  const auto gts = extract_segments(lm, 2);
  auto probs = ops::sigmoid(random_tensor({4, 12}, rng, -2, 2));
  auto logits = random_tensor({4, 3}, rng);
  const LossConfig lc;
  const auto cost = match_cost(probs, logits, gts, lc);
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t q = 0; q < 4; ++q) {
      auto row = ops::slice(probs, 0, q, 1);
      Tensor<double> target(Shape{1, 12}, std::vector<double>(gts.masks[g].begin(), gts.masks[g].end()));
      auto lr = ops::slice(logits, 0, q, 1);
      const double nll = cls_loss(lr, {gts.classes[g]}, {1.0}).item();
      const double expect = lc.lambda_mask * (bce_loss(row, target).item() + dice_loss(row, target).item()) +
                            lc.lambda_cls * nll;
      EXPECT_NEAR(cost[g * 4 + q], expect, 1e-12);
    }
}

TEST(Losses, QueryLossBreakdownIdentity) {
  std::mt19937_64 rng(3);
  LabelMap lm({3, 3, 3});
  for (auto& l : lm.labels) l = rng() % 3;
  const auto gts = extract_segments(lm, 2);
  auto probs = ops::sigmoid(random_tensor({5, 27}, rng, -2, 2));
  auto logits = random_tensor({5, 3}, rng);
  const LossConfig lc;
  const auto a = match(probs, logits, gts, lc);
  const auto l = query_loss(probs, logits, gts, a, lc);
  EXPECT_NO_THROW(l.check_identity(1e-12));
  // Class term: matched queries target their class, the rest the no-object
  // index with weight 0.1.
  std::vector<std::size_t> tg(5, 2);
  std::vector<double> w(5, 0.1);
  for (std::size_t g = 0; g < gts.size(); ++g) tg[a.query_of_segment[g]] = gts.classes[g], w[a.query_of_segment[g]] = 1;
  EXPECT_NEAR(l.cls.item(), cls_loss(logits, tg, w).item(), 1e-14);
}

TEST(Losses, ExtractSegmentsSkipsAbsentClasses) {
  LabelMap lm({1, 1, 4});
  lm.labels = {0, 2, 2, 0};
  const auto s = extract_segments(lm, 2);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.classes[0], 1u);
  EXPECT_EQ(s.masks[0], (std::vector<float>{0, 1, 1, 0}));
}

TEST(Losses, DeepSupervisionWeights) {
  const auto w = deep_supervision_weights(3);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 1.75);
  EXPECT_DOUBLE_EQ(w[1], 0.5 / 1.75);
  EXPECT_DOUBLE_EQ(w[2], 0.25 / 1.75);
}

TEST(Losses, DownsampleNearestUsesHalfPixelCenters) {
  LabelMap lm({1, 1, 4}, {1.0, 1.0, 0.5});
  lm.labels = {0, 1, 2, 3};
  const auto d = downsample_nearest(lm, Dims{1, 1, 2});
  EXPECT_EQ(d.labels, (std::vector<std::uint8_t>{1, 3}));
  EXPECT_DOUBLE_EQ(d.spacing[2], 1.0);
}

TEST(Losses, PlainSegLossHandValue) {
  // Two classes (background + 1) over two voxels.
  Tensor<double> logits(Shape{2, 1, 1, 2}, {0.0, 1.0, 1.0, 0.0});
  LabelMap lm({1, 1, 2});
  lm.labels = {1, 0};
  const auto l = plain_seg_loss(logits, lm);
  const double p = 1.0 / (1.0 + std::exp(-1.0));  // correct-class probability at both voxels
  EXPECT_NEAR(l.ce.item(), -std::log(p), 1e-15);
  // foreground probs (p, 1 - p), target (1, 0)
  EXPECT_NEAR(l.dice.item(), 1.0 - (2 * p + 1) / (1.0 + 1.0 + 1.0), 1e-15);
  EXPECT_NO_THROW(l.check_identity(1e-12));
}

TEST(Losses, FrozenMatchingGradients) {
  for (const auto& c : gradient_cases())
    if (c.name == "set_loss" || c.name == "plain_loss") EXPECT_LT(run_grad_case(c, 3).err64, 1e-3) << c.name;
}
