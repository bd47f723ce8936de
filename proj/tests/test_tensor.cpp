// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "icarus/tensor.hpp"

namespace icarus {
namespace {

Tensor64 random64(Shape s, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, 1);
  Tensor64 t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

Tensor randomf(Shape s, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, scale);
  Tensor t(s);
  for (float& v : t.data()) v = static_cast<float>(d(rng));
  return t;
}

TEST(Tensor, ConstructionChecksSize) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(Tensor::kPrecisionBits, 32);
  EXPECT_EQ(Tensor64::kPrecisionBits, 64);
}

TEST(Matmul, Identity) {
  auto i2 = Tensor::matrix({{1, 0}, {0, 1}});
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_TRUE(matmul(i2, m).bit_identical(m));
}

TEST(Matmul, Projector) {
  auto p = Tensor::matrix({{1, 0}, {0, 0}});
  auto m = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_TRUE(matmul(p, m).bit_identical(Tensor::matrix({{5, 6}, {0, 0}})));
}

TEST(Matmul, MatchesTripleLoop) {
  auto a = random64({4, 3}, 1);
  auto b = random64({3, 2}, 2);
  auto c = matmul(a, b);
  for (size_t i = 0; i < 4; ++i) {
    for (size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      EXPECT_EQ(c(i, j), s);
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 5}));
    FAIL();
  } catch (const DimensionError& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("[2,3]"), std::string::npos) << m;
    EXPECT_NE(m.find("[4,5]"), std::string::npos) << m;
  }
}

TEST(Matmul, RepeatedRunsBitIdentical) {
  auto a = randomf({7, 13}, 3);
  auto b = randomf({13, 5}, 4);
  EXPECT_TRUE(matmul(a, b).bit_identical(matmul(a, b)));
}

TEST(Matmul, TransposedVariantsAgree) {
  auto a = random64({3, 4}, 5);
  auto b = random64({5, 4}, 6);
  auto nt = matmul_nt(a, b);
  auto at = random64({4, 3}, 7);
  auto tn = matmul_tn(at, random64({4, 2}, 8));
  auto bt = random64({4, 2}, 8);
  for (size_t i = 0; i < 3; ++i) {
    for (size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (size_t k = 0; k < 4; ++k) s += a(i, k) * b(j, k);
      EXPECT_NEAR(nt(i, j), s, 1e-12);
    }
    for (size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (size_t k = 0; k < 4; ++k) s += at(k, i) * bt(k, j);
      EXPECT_NEAR(tn(i, j), s, 1e-12);
    }
  }
}

TEST(Softmax, Symmetric) {
  auto s = softmax_lastdim(Tensor64::vector({0, 0}));
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
}

TEST(Softmax, SaturatesWithoutOverflow) {
  auto s = softmax_lastdim(Tensor64::vector({1000, 0}));
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  auto x = randomf({8}, 9, 3.0);
  auto s = softmax_lastdim(x);
  double z = 0;
  for (float v : x.data()) z += std::exp(static_cast<double>(v));
  double total = 0;
  for (size_t i = 0; i < 8; ++i) {
    const double want = std::exp(static_cast<double>(x[i])) / z;
    EXPECT_NEAR(s[i], want, 1e-6 * want);
    total += s[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(Softmax, EmptyLastDimThrows) { EXPECT_THROW(softmax_lastdim(Tensor({3, 0})), DimensionError); }

TEST(RmsNorm, ZeroRowStaysZero) {
  auto y = rms_norm(Tensor({1, 4}, 0.0f), Tensor({4}, 1.0f), 1e-6f);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(RmsNorm, ConstantRowNormalizesToSign) {
  auto y = rms_norm(Tensor64({2, 3}, std::vector<double>{-5, -5, -5, 2, 2, 2}), Tensor64({3}, 1.0), 1e-30);
  for (size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(y(0, j), -1.0, 1e-12);
    EXPECT_NEAR(y(1, j), 1.0, 1e-12);
  }
}

TEST(RmsNorm, MatchesDirectFormula) {
  auto x = randomf({3, 16}, 10);
  auto g = randomf({16}, 11);
  auto y = rms_norm(x, g, 1e-6f);
  for (size_t r = 0; r < 3; ++r) {
    double ms = 0;
    for (size_t j = 0; j < 16; ++j) ms += double(x(r, j)) * x(r, j);
    const double inv = 1.0 / std::sqrt(ms / 16 + 1e-6);
    for (size_t j = 0; j < 16; ++j) EXPECT_NEAR(y(r, j), x(r, j) * inv * g[j], 1e-6);
  }
}

TEST(RmsNorm, GainShapeChecked) { EXPECT_THROW(rms_norm(Tensor({2, 4}), Tensor({3}), 1e-6f), DimensionError); }

TEST(Rope, PositionZeroIsIdentity) {
  auto x = randomf({3, 8}, 12);
  EXPECT_TRUE(rope_apply(x, 0, 10000.0).bit_identical(x));
}

TEST(Rope, UnitPairRotates) {
  // head_dim 2: a single pair with frequency theta^0 = 1.
  auto y = rope_apply(Tensor64::vector({1, 0}).reshaped({1, 2}), 3, 10000.0);
  EXPECT_NEAR(y[0], std::cos(3.0), 1e-15);
  EXPECT_NEAR(y[1], std::sin(3.0), 1e-15);
  // Second pair of a 4-wide head turns at theta^(-1/2).
  auto z = rope_apply(Tensor64::vector({0, 0, 1, 0}).reshaped({1, 4}), 5, 100.0);
  EXPECT_NEAR(z[2], std::cos(5.0 / 10.0), 1e-15);
  EXPECT_NEAR(z[3], std::sin(5.0 / 10.0), 1e-15);
}

TEST(Rope, PreservesPairNorms) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto x = randomf({2, 16}, 100 + seed);
    auto y = rope_apply(x, 17 * seed + 3, 10000.0);
    for (size_t r = 0; r < 2; ++r) {
      for (size_t p = 0; p < 8; ++p) {
        const double a = std::hypot(x(r, 2 * p), x(r, 2 * p + 1));
        const double b = std::hypot(y(r, 2 * p), y(r, 2 * p + 1));
        EXPECT_NEAR(a, b, 1e-6);
      }
    }
  }
}

TEST(Rope, OddHeadDimThrows) {
  Tensor x({1, 3});
  EXPECT_THROW(rope_inplace<float>(x.row(0), 3, 1, 10000.0), ConfigError);
}

TEST(Rope, InverseUndoesRotation) {
  auto x = random64({1, 8}, 13);
  auto y = x;
  rope_inplace<double>(y.row(0), 8, 11, 10000.0);
  rope_inplace<double>(y.row(0), 8, 11, 10000.0, true);
  EXPECT_LT(max_abs_diff(x, y), 1e-14);
}

TEST(Silu, Values) {
  EXPECT_EQ(silu_scalar(0.0), 0.0);
  for (double x = 20; x < 40; x += 3) EXPECT_NEAR(silu_scalar(x), x, 1e-6);
  auto v = randomf({32}, 14, 4.0);
  auto y = silu(v);
  for (size_t i = 0; i < 32; ++i) {
    const double x = v[i];
    EXPECT_NEAR(y[i], x / (1 + std::exp(-x)), 1e-7 * std::max(1.0, std::abs(x)));
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  Tensor64 z({10}, 0.0);
  EXPECT_NEAR(cross_entropy(z, 3), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, MatchesDirectFormulaAndChecksTarget) {
  auto z = random64({6}, 15);
  double s = 0;
  for (double v : z.data()) s += std::exp(v);
  EXPECT_NEAR(cross_entropy(z, 2), -std::log(std::exp(z[2]) / s), 1e-12);
  EXPECT_THROW(cross_entropy(z, 6), IndexError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  std::vector<float> v{1, 3, 3, 2};
  EXPECT_EQ(argmax(std::span<const float>(v)), 1u);
}

TEST(FiniteDifference, QuadraticGradient) {
  auto p = Tensor64::vector({1.5, -2.0, 0.25});
  auto g = finite_difference_grad([](const Tensor64& x) { return x[0] * x[0] + 3 * x[1] + x[0] * x[2]; }, p,
                                  1e-5);
  EXPECT_NEAR(g[0], 2 * 1.5 + 0.25, 1e-8);
  EXPECT_NEAR(g[1], 3.0, 1e-8);
  EXPECT_NEAR(g[2], 1.5, 1e-8);
  EXPECT_THROW(finite_difference_grad([](const Tensor64&) { return 0.0; }, p, 0.0), ConfigError);
  EXPECT_THROW(finite_difference_grad([](const Tensor64&) { return NAN; }, p, 1e-3), NumericError);
}

TEST(Tensor, FinitenessAfterOps) {
  auto x = randomf({4, 32}, 16, 50.0);
  EXPECT_TRUE(softmax_lastdim(x).all_finite());
  EXPECT_TRUE(rms_norm(x, Tensor({32}, 1.0f), 1e-6f).all_finite());
  EXPECT_TRUE(silu(x).all_finite());
}

}  // namespace
}  // namespace icarus
