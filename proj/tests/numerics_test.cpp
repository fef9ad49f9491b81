#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "deepcot/numerics.hpp"
#include "deepcot/attention.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using deepcot::Matrix;
using test_support::random_matrix;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix<double> m{{1, 2}, {3, 4}};
  EXPECT_EQ(deepcot::matmul(Matrix<double>::identity(2), m), m);
}

TEST(Matmul, OrthogonalVectorsGiveZero) {
  const Matrix<double> a{{1, 0}};
  const Matrix<double> b{{0}, {1}};
  EXPECT_EQ(deepcot::matmul(a, b), (Matrix<double>{{0}}));
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  const auto a = random_matrix(3, 4, 1);
  const auto b = random_matrix(4, 2, 2);
  const auto c = deepcot::matmul(a, b);
  const auto ref = oracle::matmul(test_support::to_rows(a), test_support::to_rows(b));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c(i, j), ref[i][j], 1e-12);
  }
}

TEST(Matmul, RejectsShapeMismatch) {
  EXPECT_THROW(deepcot::matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), deepcot::ShapeError);
}

TEST(Matmul, RejectsOverflowToInfinity) {
  const Matrix<double> big{{1e300, 1e300}};
  const Matrix<double> col{{1e300}, {1e300}};
  EXPECT_THROW(deepcot::matmul(big, col), deepcot::NumericError);
}

TEST(Matmul, RepeatedRunsAreBitIdentical) {
  const auto a = random_matrix(17, 33, 3);
  const auto b = random_matrix(33, 9, 4);
  EXPECT_EQ(deepcot::matmul(a, b), deepcot::matmul(a, b));
  const auto af = a.cast<float>();
  const auto bf = b.cast<float>();
  EXPECT_EQ(deepcot::matmul(af, bf), deepcot::matmul(af, bf));
}

TEST(MatrixType, RejectsWrongDataLength) {
  EXPECT_THROW(Matrix<double>(2, 2, std::vector<double>(3)), deepcot::ShapeError);
}

TEST(RowSoftmax, SymmetricRowIsUniform) {
  const auto p = deepcot::row_softmax(Matrix<double>{{0, 0}});
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
}

TEST(RowSoftmax, SingleColumnIsOne) {
  EXPECT_DOUBLE_EQ(deepcot::row_softmax(Matrix<double>{{-3.7}})(0, 0), 1.0);
}

TEST(RowSoftmax, LargeLogitsAreStable) {
  // Reference: with e = exp(-1), the row is [1, 1, e] / (2 + e), evaluated in long double.
  const long double e = std::exp(-1.0L);
  const long double z = 2.0L + e;
  const double want[] = {static_cast<double>(1.0L / z), static_cast<double>(1.0L / z), static_cast<double>(e / z)};
  const auto p64 = deepcot::row_softmax(Matrix<double>{{1000, 1000, 999}});
  const auto p32 = deepcot::row_softmax(Matrix<float>{{1000, 1000, 999}});
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(p64(0, c), want[c], 1e-15);
    EXPECT_NEAR(p32(0, c), want[c], 1e-6);
  }
}

TEST(RowSoftmax, RejectsNonFiniteInput) {
  EXPECT_THROW(deepcot::row_softmax(Matrix<double>{{0, std::numeric_limits<double>::quiet_NaN()}}),
               deepcot::NumericError);
  EXPECT_THROW(deepcot::row_softmax(Matrix<double>{{std::numeric_limits<double>::infinity()}}),
               deepcot::NumericError);
}

TEST(RowSoftmax, RowsSumToOneProperty) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = random_matrix(1 + seed % 5, 1 + seed % 11, seed, 1.0 + static_cast<double>(seed));
    const auto p = deepcot::row_softmax(s);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double sum = 0;
      for (double v : p.row(i)) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(PairwiseSqEuclid, SelfDistanceIsZero) {
  EXPECT_EQ(deepcot::pairwise_sq_euclid(Matrix<double>{{1, 2}}, Matrix<double>{{1, 2}}), (Matrix<double>{{0}}));
  const auto x = random_matrix(6, 3, 5);
  const auto d = deepcot::pairwise_sq_euclid(x, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(d(i, i), 0.0);
}

TEST(PairwiseSqEuclid, HandEvaluatedPair) {
  EXPECT_DOUBLE_EQ(deepcot::pairwise_sq_euclid(Matrix<double>{{1, 0}}, Matrix<double>{{0, 1}})(0, 0), 2.0);
}

TEST(PairwiseSqEuclid, MatchesNormExpansion) {
  const auto q = random_matrix(4, 3, 6);
  const auto k = random_matrix(5, 3, 7);
  const auto d = deepcot::pairwise_sq_euclid(q, k);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double qq = 0, kk = 0, qk = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        qq += q(i, c) * q(i, c);
        kk += k(j, c) * k(j, c);
        qk += q(i, c) * k(j, c);
      }
      EXPECT_NEAR(d(i, j), qq + kk - 2 * qk, 1e-6);
      EXPECT_GE(d(i, j), 0.0);
    }
  }
}

TEST(PairwiseSqEuclid, RejectsWidthMismatch) {
  EXPECT_THROW(deepcot::pairwise_sq_euclid(Matrix<double>(1, 2), Matrix<double>(1, 3)), deepcot::ShapeError);
}

TEST(SoftActivation, DiagonalIsExactlyOne) {
  const auto x = random_matrix(5, 4, 8);
  const auto a = deepcot::soft_activation(x, x, 4);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a(i, i), 1.0);
  for (double v : a.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(SoftActivation, DirectEvaluation) {
  // |q-k|^2 = 2, head_dim = 4: exp(-2 / (2 * 2)) = exp(-0.5).
  const auto a = deepcot::soft_activation(Matrix<double>{{1, 0, 0, 0}}, Matrix<double>{{0, 1, 0, 0}}, 4);
  EXPECT_NEAR(a(0, 0), 0.60653065971263342, 1e-15);
  EXPECT_NEAR(a(0, 0), std::exp(-0.5), 1e-15);
}

TEST(SoftActivation, RowsAreNotNormalized) {
  const auto q = random_matrix(2, 4, 9);
  const auto k = random_matrix(6, 4, 10);
  const auto a = deepcot::soft_activation(q, k, 4);
  double sum = 0;
  for (double v : a.row(0)) sum += v;
  EXPECT_GT(std::abs(sum - 1.0), 1e-3);
}

TEST(SoftActivation, RejectsZeroHeadDim) {
  EXPECT_THROW(deepcot::soft_activation(Matrix<double>(1, 0), Matrix<double>(1, 0), 0), deepcot::ShapeError);
}

// Weighted value sums over a column split: SOFT splits exactly, softmax does not.
TEST(SoftActivation, AdditiveOverKeyPartitionButSoftmaxIsNot) {
  int softmax_splits_cleanly = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t rows = 3 + seed % 6;
    const std::size_t c = 1 + seed % (rows - 1);
    const auto q = random_matrix(1, 4, 100 + seed);
    const auto k = random_matrix(rows, 4, 200 + seed);
    const auto v = random_matrix(rows, 3, 300 + seed);
    const std::span<const double> qr = q.row(0);
    for (auto act : {deepcot::ActivationKind::Soft, deepcot::ActivationKind::Softmax}) {
      const auto whole = deepcot::attend_rows(qr, k, v, 0, rows, act);
      const auto left = deepcot::attend_rows(qr, k, v, 0, c, act);
      const auto right = deepcot::attend_rows(qr, k, v, c, rows, act);
      double gap = 0;
      for (std::size_t j = 0; j < 3; ++j) gap = std::max(gap, std::abs(whole[j] - left[j] - right[j]));
      if (act == deepcot::ActivationKind::Soft) {
        EXPECT_LE(gap, 1e-6);
      } else if (gap <= 1e-6) {
        ++softmax_splits_cleanly;
      }
    }
  }
  EXPECT_EQ(softmax_splits_cleanly, 0);
}
