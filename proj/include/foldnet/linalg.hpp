#pragma once

// Dense linear algebra used throughout foldnet: row-major matrices,
// minimum-norm least squares and truncated SVD.
//
// Vectors are row vectors: a layer activity x maps through a weight matrix
// W (s(from) x s(to)) as x * W.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace foldnet {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::RowVectorXd;

class LinalgError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Singular values at or below this fraction of the largest one are treated
/// as zero by the least-squares solver.
inline constexpr double kRankTolerance = 1e-10;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "×" + std::to_string(cols);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

struct LeastSquares {
  Vector x;
  double residual = 0.0;  // ||A x - b||_2
};

/// Minimum-norm solution of min ||A x - b||_2 through an SVD pseudoinverse.
/// An all-zero A yields x = 0 and residual ||b||.
inline LeastSquares ols_min_norm(const Matrix& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.rows() < 1 || a.cols() < 1) {
    throw LinalgError("ols_min_norm: empty system " + shape_str(a.rows(), a.cols()));
  }
  if (a.rows() != b.size()) {
    throw LinalgError("ols_min_norm: A is " + shape_str(a.rows(), a.cols()) +
                      " but b has length " + std::to_string(b.size()));
  }
  if (!a.allFinite() || !b.allFinite()) {
    throw LinalgError("ols_min_norm: non-finite input");
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sigma = svd.singularValues();
  const double cutoff = sigma.size() > 0 ? kRankTolerance * sigma(0) : 0.0;

  Eigen::VectorXd utb = svd.matrixU().transpose() * b;
  for (Eigen::Index k = 0; k < sigma.size(); ++k) {
    utb(k) = (sigma(k) > cutoff && sigma(k) > 0.0) ? utb(k) / sigma(k) : 0.0;
  }
  LeastSquares out;
  out.x = (svd.matrixV() * utb).transpose();
  out.residual = (a * out.x.transpose() - b).norm();
  return out;
}

/// Returns R (p x p, upper triangular) with ||A x|| == ||R x|| for every x.
/// Useful to shrink tall least-squares systems before repeated solves over
/// column subsets. Matrices with rows <= cols are returned unchanged.
inline Matrix compress_rows(const Matrix& a) {
  if (a.rows() <= a.cols()) return a;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Matrix r = qr.matrixQR().topRows(a.cols()).triangularView<Eigen::Upper>();
  return r;
}

struct LowRankFactors {
  Matrix y;  // n x r
  Matrix z;  // r x p
  Eigen::VectorXd singular_values;  // all of them, descending
};

/// Best rank-r approximation X ~= Y Z with the singular values split evenly:
/// Y = U_r sqrt(S_r), Z = sqrt(S_r) V_r^T.
inline LowRankFactors truncated_svd(const Matrix& x, Eigen::Index rank) {
  const Eigen::Index limit = std::min(x.rows(), x.cols());
  if (rank < 1 || rank > limit) {
    throw LinalgError("truncated_svd: rank " + std::to_string(rank) + " outside [1, " +
                      std::to_string(limit) + "] for " + shape_str(x.rows(), x.cols()));
  }
  if (!x.allFinite()) throw LinalgError("truncated_svd: non-finite input");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::VectorXd root = svd.singularValues().head(rank).cwiseSqrt();

  LowRankFactors out;
  out.y = svd.matrixU().leftCols(rank) * root.asDiagonal();
  out.z = root.asDiagonal() * svd.matrixV().leftCols(rank).transpose();
  out.singular_values = svd.singularValues();
  return out;
}

inline Matrix block_diagonal(const std::vector<const Matrix*>& blocks) {
  Eigen::Index rows = 0, cols = 0;
  for (const Matrix* b : blocks) {
    rows += b->rows();
    cols += b->cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Eigen::Index r = 0, c = 0;
  for (const Matrix* b : blocks) {
    out.block(r, c, b->rows(), b->cols()) = *b;
    r += b->rows();
    c += b->cols();
  }
  return out;
}

inline Matrix stack_vertical(const std::vector<const Matrix*>& blocks) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = blocks.empty() ? 0 : blocks.front()->cols();
  for (const Matrix* b : blocks) {
    if (b->cols() != cols) throw LinalgError("stack_vertical: column count mismatch");
    rows += b->rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Matrix* b : blocks) {
    out.middleRows(r, b->rows()) = *b;
    r += b->rows();
  }
  return out;
}

inline Matrix stack_horizontal(const std::vector<const Matrix*>& blocks) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = blocks.empty() ? 0 : blocks.front()->rows();
  for (const Matrix* b : blocks) {
    if (b->rows() != rows) throw LinalgError("stack_horizontal: row count mismatch");
    cols += b->cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Matrix* b : blocks) {
    out.middleCols(c, b->cols()) = *b;
    c += b->cols();
  }
  return out;
}

inline Matrix drop_column(const Matrix& m, Eigen::Index j) {
  Matrix out(m.rows(), m.cols() - 1);
  out.leftCols(j) = m.leftCols(j);
  out.rightCols(m.cols() - j - 1) = m.rightCols(m.cols() - j - 1);
  return out;
}

inline Matrix drop_row(const Matrix& m, Eigen::Index i) {
  Matrix out(m.rows() - 1, m.cols());
  out.topRows(i) = m.topRows(i);
  out.bottomRows(m.rows() - i - 1) = m.bottomRows(m.rows() - i - 1);
  return out;
}

}  // namespace foldnet
