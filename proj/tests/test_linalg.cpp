#include "foldnet/linalg.hpp"

#include <gtest/gtest.h>

#include <Eigen/QR>

#include <random>

using namespace foldnet;

namespace {

Matrix random_matrix(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
  return m;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double d : v) x(k++) = d;
  return x;
}

}  // namespace

TEST(OlsMinNorm, DropsUnreachableComponent) {
  Matrix a(3, 2);
  a << 1, 0, 0, 1, 0, 0;
  const auto ls = ols_min_norm(a, vec({1, 0, 1}));
  EXPECT_NEAR(ls.x(0), 1.0, 1e-12);
  EXPECT_NEAR(ls.x(1), 0.0, 1e-12);
  EXPECT_NEAR(ls.residual, 1.0, 1e-12);
}

TEST(OlsMinNorm, Identity) {
  const auto ls = ols_min_norm(Matrix::Identity(3, 3), vec({2, 3, 4}));
  EXPECT_NEAR((ls.x - Vector(vec({2, 3, 4}).transpose())).norm(), 0.0, 1e-12);
  EXPECT_NEAR(ls.residual, 0.0, 1e-12);
}

TEST(OlsMinNorm, RankDeficientPicksMinimumNorm) {
  Matrix a(2, 2);
  a << 1, 1, 1, 1;
  const auto ls = ols_min_norm(a, vec({2, 2}));
  EXPECT_NEAR(ls.x(0), 1.0, 1e-12);
  EXPECT_NEAR(ls.x(1), 1.0, 1e-12);
  EXPECT_NEAR(ls.residual, 0.0, 1e-12);
}

TEST(OlsMinNorm, AllZeroMatrixIsNotAnError) {
  const auto ls = ols_min_norm(Matrix::Zero(3, 2), vec({3, 0, 4}));
  EXPECT_EQ(ls.x.norm(), 0.0);
  EXPECT_NEAR(ls.residual, 5.0, 1e-12);
}

TEST(OlsMinNorm, DimensionMismatchThrows) {
  EXPECT_THROW(ols_min_norm(Matrix::Identity(3, 3), vec({1, 2})), LinalgError);
  EXPECT_THROW(ols_min_norm(Matrix(0, 2), Eigen::VectorXd(0)), LinalgError);
}

TEST(OlsMinNorm, NonFiniteInputThrows) {
  Matrix a = Matrix::Identity(2, 2);
  a(0, 1) = std::nan("");
  EXPECT_THROW(ols_min_norm(a, vec({1, 1})), LinalgError);
}

TEST(OlsMinNorm, ResidualNotAboveRandomCandidates) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(8, 4, rng);
    const Eigen::VectorXd b = random_matrix(8, 1, rng).col(0);
    const auto ls = ols_min_norm(a, b);
    for (int c = 0; c < 100; ++c) {
      Eigen::VectorXd x = ls.x.transpose();
      for (Eigen::Index k = 0; k < x.size(); ++k) x(k) += 0.5 * n(rng);
      EXPECT_LE(ls.residual, (a * x - b).norm() + 1e-12);
    }
  }
}

TEST(OlsMinNorm, MatchesCompleteOrthogonalDecomposition) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    // rank 3 matrix with 6 columns
    const Matrix a = random_matrix(10, 3, rng) * random_matrix(3, 6, rng);
    const Eigen::VectorXd b = random_matrix(10, 1, rng).col(0);
    const auto ls = ols_min_norm(a, b);
    const Eigen::MatrixXd dense = a;
    const Eigen::VectorXd oracle = dense.completeOrthogonalDecomposition().solve(b);
    EXPECT_NEAR((ls.x.transpose() - oracle).norm(), 0.0, 1e-9);
    // any null-space move keeps the residual and increases the norm
    Eigen::FullPivLU<Eigen::MatrixXd> lu(dense);
    const Eigen::MatrixXd null = lu.kernel();
    const Eigen::VectorXd moved = oracle + null.col(0) * 0.3;
    EXPECT_NEAR((dense * moved - b).norm(), ls.residual, 1e-9);
    EXPECT_LT(ls.x.norm(), moved.norm());
  }
}

TEST(TruncatedSvd, RankOneIsExact) {
  Matrix x(2, 2);
  x << 3, 4, 6, 8;
  const auto f = truncated_svd(x, 1);
  EXPECT_LE((f.y * f.z - x).norm(), 1e-9);
}

TEST(TruncatedSvd, FullRankReconstructs) {
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(5, 7, rng);
  const auto f = truncated_svd(x, 5);
  EXPECT_EQ(f.y.rows(), 5);
  EXPECT_EQ(f.y.cols(), 5);
  EXPECT_EQ(f.z.rows(), 5);
  EXPECT_EQ(f.z.cols(), 7);
  EXPECT_LE((f.y * f.z - x).norm(), 1e-9);
}

TEST(TruncatedSvd, EckartYoungOnDiagonal) {
  Matrix x(2, 2);
  x << 5, 0, 0, 1;
  const auto f = truncated_svd(x, 1);
  EXPECT_NEAR((x - f.y * f.z).norm(), 1.0, 1e-12);
}

TEST(TruncatedSvd, FactorsShareSingularValuesEvenly) {
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(6, 4, rng);
  const auto f = truncated_svd(x, 3);
  // Y^T Y == Z Z^T == diag(sigma_1..sigma_r)
  const Matrix yy = f.y.transpose() * f.y;
  const Matrix zz = f.z * f.z.transpose();
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(yy(k, k), f.singular_values(k), 1e-9);
    EXPECT_NEAR(zz(k, k), f.singular_values(k), 1e-9);
  }
}

TEST(TruncatedSvd, ErrorNonIncreasingInRank) {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(4, 3, rng) * random_matrix(3, 6, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int r = 1; r <= 4; ++r) {
    const auto f = truncated_svd(x, r);
    const double err = (x - f.y * f.z).norm();
    EXPECT_LE(err, prev + 1e-12);
    prev = err;
    if (r >= 3) EXPECT_LE(err, 1e-9 * x.norm());
  }
}

TEST(TruncatedSvd, RankOutOfRangeThrows) {
  const Matrix x = Matrix::Identity(3, 2);
  EXPECT_THROW(truncated_svd(x, 0), LinalgError);
  EXPECT_THROW(truncated_svd(x, 3), LinalgError);
}

TEST(CompressRows, PreservesNormsOfProducts) {
  std::mt19937_64 rng(6);
  const Matrix a = random_matrix(200, 5, rng);
  const Matrix r = compress_rows(a);
  EXPECT_LE(r.rows(), 5);
  for (int t = 0; t < 10; ++t) {
    const Eigen::VectorXd x = random_matrix(5, 1, rng).col(0);
    EXPECT_NEAR((a * x).norm(), (r * x).norm(), 1e-9);
  }
}

TEST(BlockHelpers, Shapes) {
  const Matrix a = Matrix::Ones(2, 3);
  const Matrix b = Matrix::Constant(1, 2, 2.0);
  const Matrix d = block_diagonal({&a, &b});
  EXPECT_EQ(d.rows(), 3);
  EXPECT_EQ(d.cols(), 5);
  EXPECT_EQ(d(2, 3), 2.0);
  EXPECT_EQ(d(0, 3), 0.0);
  EXPECT_EQ(stack_vertical({&a, &a}).rows(), 4);
  EXPECT_EQ(stack_horizontal({&a, &a}).cols(), 6);
  EXPECT_THROW(stack_vertical({&a, &b}), LinalgError);
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  Matrix expect_col(2, 2);
  expect_col << 1, 3, 4, 6;
  EXPECT_EQ(drop_column(m, 1), expect_col);
  Matrix expect_row(1, 3);
  expect_row << 4, 5, 6;
  EXPECT_EQ(drop_row(m, 0), expect_row);
}
