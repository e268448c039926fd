#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "wavemix/conv.hpp"
#include "wavemix/grad_check.hpp"
#include "wavemix/losses.hpp"
#include "wavemix/nn.hpp"
#include "wavemix/ops.hpp"

namespace wavemix {
namespace {

using testing::inner;
using testing::random_tensor;

// Weighted sum so gradient checks see a non-uniform upstream gradient.
Tensor<double> probe_loss(const Tensor<double>& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed)));
}

TEST(Conv2d, PointwiseIdentityKernel) {
  auto x = random_tensor(Shape{2, 3, 4, 4}, 1);
  Tensor<double> w(Shape{3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = conv2d(x, w, Tensor<double>(Shape{1, 3, 1, 1}), 1, 0);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
}

TEST(Conv2d, AllOnesSum) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
  Tensor<double> w(Shape{1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, w, Tensor<double>(), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0);
}

TEST(Conv2d, MatchesNaiveLoopOracleAcrossGeometries) {
  std::uint64_t seed = 0;
  for (std::int64_t k = 1; k <= 4; ++k)
    for (std::int64_t stride = 1; stride <= 2; ++stride)
      for (std::int64_t pad = 0; pad <= 1; ++pad)
        for (const Shape s : {Shape{1, 3, 6, 6}, Shape{2, 4, 8, 8}, Shape{2, 1, 5, 7}}) {
          if (s.h + 2 * pad < k) continue;
          auto x = random_tensor(s, ++seed);
          auto w = random_tensor(Shape{5, s.c, k, k}, ++seed);
          auto b = random_tensor(Shape{1, 5, 1, 1}, ++seed);
          Shape os;
          auto expected = testing::naive_conv2d(x, w, b, stride, pad, os);
          auto y = conv2d(x, w, b, stride, pad);
          ASSERT_EQ(y.shape(), os);
          for (std::size_t i = 0; i < expected.size(); ++i) {
            EXPECT_NEAR(y.data()[i], expected[i], 1e-6 * std::max(1.0, std::abs(expected[i])));
          }
        }
}

TEST(Conv2d, Random1x3x6x6With8Filters) {
  auto x = random_tensor(Shape{1, 3, 6, 6}, 40);
  auto w = random_tensor(Shape{8, 3, 3, 3}, 41);
  auto b = random_tensor(Shape{1, 8, 1, 1}, 42);
  Shape os;
  auto expected = testing::naive_conv2d(x, w, b, 1, 1, os);
  auto y = conv2d(x, w, b, 1, 1);
  EXPECT_LT(testing::max_abs_diff<double>(y.data(), expected), 1e-12);
}

TEST(Conv2d, Errors) {
  auto x = random_tensor(Shape{1, 2, 3, 3}, 1);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{1, 3, 1, 1}), Tensor<double>(), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{1, 2, 5, 5}), Tensor<double>(), 1, 0), ShapeError);
}

TEST(ConvTranspose2d, ShapeFormula) {
  Rng rng(1);
  ConvTranspose2dLayer<double> layer("up", 1, 3, 4, 2, 1, rng);
  auto y = layer(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  auto y2 = layer(Tensor<double>(Shape{2, 1, 7, 5}, 1.0));
  EXPECT_EQ(y2.shape(), (Shape{2, 3, 14, 10}));
  EXPECT_THROW(layer(Tensor<double>(Shape{1, 2, 2, 2})), ShapeError);
}

TEST(ConvTranspose2d, DeltaInputScattersCroppedKernel) {
  auto kernel = random_tensor(Shape{1, 1, 4, 4}, 3);
  Tensor<double> x(Shape{1, 1, 2, 2});
  x.at(0, 0, 1, 0) = 1.0;  // delta at row 1, col 0
  auto y = conv_transpose2d(x, kernel, Tensor<double>(), 2, 1);
  // Scatter oracle: out[i*s - p + a][j*s - p + b] += K[a][b] for the single live input.
  Tensor<double> expected(Shape{1, 1, 4, 4});
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      const int oh = 1 * 2 - 1 + a;
      const int ow = 0 * 2 - 1 + b;
      if (oh >= 0 && oh < 4 && ow >= 0 && ow < 4) expected.at(0, 0, oh, ow) += kernel.at(0, 0, a, b);
    }
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y.data()[i], expected.data()[i]);
}

TEST(ConvTranspose2d, IsAdjointOfConv2d) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const std::int64_t k = 1 + static_cast<std::int64_t>(trial % 4);
    const std::int64_t stride = 1 + static_cast<std::int64_t>(trial % 2);
    const std::int64_t pad = static_cast<std::int64_t>((trial / 2) % 2);
    // Choose the big side so the deconv reproduces it exactly.
    const std::int64_t small = 3;
    const std::int64_t big = (small - 1) * stride - 2 * pad + k;
    if (big <= 0) continue;
    auto w = random_tensor(Shape{4, 3, k, k}, trial * 7 + 1);  // conv: 3 -> 4 channels
    auto x = random_tensor(Shape{2, 3, big, big}, trial * 7 + 2);
    auto y = random_tensor(Shape{2, 4, small, small}, trial * 7 + 3);
    auto cx = conv2d(x, w, Tensor<double>(), stride, pad);
    ASSERT_EQ(cx.shape(), y.shape());
    // (C_out, C_in, k, k) of the conv is (C_in', C_out', k, k) of the deconv.
    auto ty = conv_transpose2d(y, w, Tensor<double>(), stride, pad);
    ASSERT_EQ(ty.shape(), x.shape());
    const double lhs = inner(cx, y);
    const double rhs = inner(x, ty);
    EXPECT_LT(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)), 1e-5);
  }
}

TEST(Gelu, KnownValues) {
  Tensor<double> x(Shape{1, 1, 1, 3}, {0.0, 10.0, 1.0});
  auto y = gelu(x);
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 10.0, 1e-6);
  // 1 * Phi(1) evaluated through erf.
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(y.data()[2], phi1, 1e-15);
  EXPECT_NEAR(y.data()[2], 0.8413447, 1e-7);
}

TEST(BatchNorm, TrainModeStandardizes) {
  BatchNorm2d<double> bn("bn", 3);
  auto x = random_tensor(Shape{4, 3, 5, 5}, 7, -3, 5);
  auto y = batch_norm2d(x, bn);
  for (std::int64_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const double count = 4 * 25;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 25; ++i) m += y.data()[(n * 3 + c) * 25 + i];
    m /= count;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 25; ++i) v += std::pow(y.data()[(n * 3 + c) * 25 + i] - m, 2);
    v /= count;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_LT(std::abs(v - 1.0), 1e-4);
  }
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  BatchNorm2d<double> bn("bn", 2);
  for (double& g : bn.gamma.value.data()) g = 0.0;
  bn.beta.value.data()[0] = 0.5;
  bn.beta.value.data()[1] = -2.0;
  auto y = batch_norm2d(random_tensor(Shape{2, 2, 3, 3}, 8), bn);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 9; ++i) {
      EXPECT_EQ(y.data()[(n * 2 + 0) * 9 + i], 0.5);
      EXPECT_EQ(y.data()[(n * 2 + 1) * 9 + i], -2.0);
    }
}

TEST(BatchNorm, RunningStatsUpdateOnlyInTrainMode) {
  BatchNorm2d<double> bn("bn", 1);
  Tensor<double> x(Shape{1, 1, 1, 4}, {1, 2, 3, 4});
  batch_norm2d(x, bn);
  // mean 2.5, unbiased var 5/3
  EXPECT_NEAR(bn.running_mean.value.data()[0], 0.25, 1e-12);
  EXPECT_NEAR(bn.running_var.value.data()[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
  bn.training = false;
  batch_norm2d(x, bn);
  EXPECT_NEAR(bn.running_mean.value.data()[0], 0.25, 1e-12);
}

TEST(BatchNorm, Errors) {
  BatchNorm2d<double> bn("bn", 2);
  EXPECT_THROW(batch_norm2d(Tensor<double>(Shape{1, 2, 1, 1}), bn), ValueError);
  EXPECT_THROW(batch_norm2d(Tensor<double>(Shape{2, 3, 2, 2}), bn), ShapeError);
  bn.training = false;
  EXPECT_NO_THROW(batch_norm2d(Tensor<double>(Shape{1, 2, 1, 1}), bn));
}

TEST(MaxPool, Basics) {
  Tensor<double> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(max_pool2d(x).item(), 4.0);
  Tensor<double> c(Shape{1, 2, 4, 6}, 3.5);
  auto y = max_pool2d(c);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 3.5);
  EXPECT_THROW(max_pool2d(Tensor<double>(Shape{1, 1, 3, 2})), ShapeError);
}

TEST(MaxPool, MatchesLoopOracleAndTieBreak) {
  auto x = random_tensor(Shape{1, 1, 6, 6}, 9);
  auto y = max_pool2d(x);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double m = -1e300;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) m = std::max(m, x.at(0, 0, 2 * i + a, 2 * j + b));
      EXPECT_EQ(y.at(0, 0, i, j), m);
    }
  Tensor<double> ties(Shape{1, 1, 2, 2}, 1.0, true);
  backward(sum(max_pool2d(ties)));
  EXPECT_EQ(ties.grad()[0], 1.0);
  EXPECT_EQ(ties.grad()[1] + ties.grad()[2] + ties.grad()[3], 0.0);
}

TEST(Upsample, ConstantAndSinglePixel) {
  Tensor<double> c(Shape{1, 2, 3, 4}, 1.25);
  auto y = upsample_bilinear(c, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 8}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.25);
  auto p = upsample_bilinear(Tensor<double>(Shape{1, 1, 1, 1}, 7.0), 2);
  for (double v : p.data()) EXPECT_EQ(v, 7.0);
  EXPECT_THROW(upsample_bilinear(c, 0), ValueError);
}

TEST(Upsample, MatchesAlignCornersFalseReference) {
  // 1-D row [0, 1] upsampled x2: sample points -0.25, 0.25, 0.75, 1.25 -> clamp.
  Tensor<double> x(Shape{1, 1, 1, 2}, {0.0, 1.0});
  auto y = upsample_bilinear(x, 2);
  const double expected[] = {0.0, 0.25, 0.75, 1.0};
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.at(0, 0, 0, i), expected[i]);
}

TEST(Upsample, AdjointIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = random_tensor(Shape{2, 2, 3, 5}, seed);
    auto y = random_tensor(Shape{2, 2, 6, 10}, seed + 100);
    Tensor<double> leaf = x.detach();
    leaf.set_requires_grad(true);
    auto up = upsample_bilinear(leaf, 2);
    backward(sum(mul(up, y)));  // leaf.grad = up^T y
    const double lhs = inner(up, y);
    double rhs = 0;
    for (std::size_t i = 0; i < x.data().size(); ++i) rhs += x.data()[i] * leaf.grad()[i];
    EXPECT_LT(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)), 1e-12);
  }
}

TEST(GlobalAvgPool, ValuesAndGradient) {
  EXPECT_EQ(global_avg_pool(Tensor<double>(Shape{1, 1, 3, 3}, 2.5)).item(), 2.5);
  Tensor<double> x(Shape{1, 1, 2, 2}, {1, 3, 5, 7}, true);
  auto y = global_avg_pool(x);
  EXPECT_EQ(y.item(), 4.0);
  backward(y);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
  auto r = random_tensor(Shape{2, 3, 4, 5}, 3);
  EXPECT_LT(grad_check([](const Tensor<double>& t) { return probe_loss(global_avg_pool(t), 4); }, r), 1e-9);
}

TEST(CrossEntropy, UniformAndSaturated) {
  Tensor<double> uniform(Shape{3, 5, 1, 1}, 0.7);
  std::vector<std::int32_t> t{0, 2, 4};
  EXPECT_NEAR(softmax_cross_entropy(uniform, t).item(), std::log(5.0), 1e-12);
  Tensor<double> sat(Shape{1, 3, 1, 1}, {0.0, 1000.0, 0.0});
  std::vector<std::int32_t> t1{1};
  EXPECT_NEAR(softmax_cross_entropy(sat, t1).item(), 0.0, 1e-12);
  std::vector<std::int32_t> bad{3};
  EXPECT_THROW(softmax_cross_entropy(sat, bad), ValueError);
}

TEST(CrossEntropy, TwoClassDirectFormula) {
  auto z = random_tensor(Shape{8, 2, 1, 1}, 5, -4, 4);
  std::vector<std::int32_t> t{0, 1, 1, 0, 1, 0, 0, 1};
  long double expected = 0;
  for (int n = 0; n < 8; ++n) {
    const long double zt = z.data()[n * 2 + t[n]];
    const long double zo = z.data()[n * 2 + 1 - t[n]];
    expected += std::log1p(std::exp(zo - zt));
  }
  expected /= 8;
  EXPECT_NEAR(softmax_cross_entropy(z, t).item(), static_cast<double>(expected), 1e-14);
}

TEST(CrossEntropy, SegmentationShapesAndGradient) {
  auto z = random_tensor(Shape{2, 3, 2, 2}, 6, -2, 2);
  std::vector<std::int32_t> t{0, 1, 2, 1, 2, 2, 0, 1};
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return softmax_cross_entropy(x, t); }, z), 1e-8);
  std::vector<std::int32_t> short_t{0, 1};
  EXPECT_THROW(softmax_cross_entropy(z, short_t), ShapeError);
}

TEST(FocalLoss, ReducesToCrossEntropy) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto z = random_tensor(Shape{2, 4, 3, 3}, seed, -3, 3);
    std::vector<std::int32_t> t(18);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<std::int32_t>((i * 7 + seed) % 4);
    EXPECT_NEAR(focal_loss(z, t, 0.0).item(), softmax_cross_entropy(z, t).item(), 1e-7);
  }
}

TEST(FocalLoss, HandValues) {
  Tensor<double> half(Shape{1, 2, 1, 1}, {0.3, 0.3});
  std::vector<std::int32_t> t{0};
  EXPECT_NEAR(focal_loss(half, t, 2.0).item(), 0.25 * std::log(2.0), 1e-14);
  Tensor<double> sure(Shape{1, 2, 1, 1}, {50.0, 0.0});
  EXPECT_NEAR(focal_loss(sure, t, 2.0).item(), 0.0, 1e-30);
  EXPECT_THROW(focal_loss(half, t, -1.0), ValueError);
}

TEST(FocalLoss, NonNegative) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto z = random_tensor(Shape{3, 3, 2, 2}, seed, -5, 5);
    std::vector<std::int32_t> t(12, static_cast<std::int32_t>(seed % 3));
    EXPECT_GE(focal_loss(z, t, 2.0).item(), 0.0);
    EXPECT_GE(softmax_cross_entropy(z, t).item(), 0.0);
  }
}

// Every layer against central differences, f64, 10 seeds, rel err < 1e-5.
TEST(GradCheckAllLayers, TenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SCOPED_TRACE(seed);
    auto x = random_tensor(Shape{2, 3, 4, 4}, seed, -1, 1, true);
    auto w = random_tensor(Shape{2, 3, 3, 3}, seed + 1, -1, 1, true);
    auto b = random_tensor(Shape{1, 2, 1, 1}, seed + 2, -1, 1, true);
    EXPECT_LT(grad_check_tensors([&] { return probe_loss(conv2d(x, w, b, 2, 1), seed + 3); }, {x, w, b}), 1e-5);

    auto wt = random_tensor(Shape{3, 2, 4, 4}, seed + 4, -1, 1, true);
    EXPECT_LT(grad_check_tensors([&] { return probe_loss(conv_transpose2d(x, wt, b, 2, 1), seed + 5); }, {x, wt, b}),
              1e-5);

    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return probe_loss(gelu(t), seed + 6); }, x), 1e-5);

    BatchNorm2d<double> bn("bn", 3);
    bn.gamma.value = random_tensor(Shape{1, 3, 1, 1}, seed + 7, 0.5, 1.5, true);
    bn.beta.value = random_tensor(Shape{1, 3, 1, 1}, seed + 8, -1, 1, true);
    EXPECT_LT(grad_check_tensors([&] { return probe_loss(batch_norm2d(x, bn), seed + 9); },
                                 {x, bn.gamma.value, bn.beta.value}),
              1e-5);
    bn.training = false;
    EXPECT_LT(grad_check_tensors([&] { return probe_loss(batch_norm2d(x, bn), seed + 9); },
                                 {x, bn.gamma.value, bn.beta.value}),
              1e-5);

    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return probe_loss(max_pool2d(t), seed + 10); }, x), 1e-5);
    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return probe_loss(upsample_bilinear(t, 2), seed + 11); }, x),
              1e-5);
    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return probe_loss(global_avg_pool(t), seed + 12); }, x), 1e-5);

    std::vector<std::int32_t> targets(32);
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<std::int32_t>((i + seed) % 3);
    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return softmax_cross_entropy(t, targets); }, x), 1e-5);
    EXPECT_LT(grad_check([&](const Tensor<double>& t) { return focal_loss(t, targets, 2.0); }, x), 1e-5);
  }
}

TEST(BatchNorm, GradCheck2x3x4x4) {
  BatchNorm2d<double> bn("bn", 3);
  auto x = random_tensor(Shape{2, 3, 4, 4}, 77);
  EXPECT_LT(grad_check([&](const Tensor<double>& t) { return probe_loss(batch_norm2d(t, bn), 78); }, x), 1e-6);
}

}  // namespace
}  // namespace wavemix
