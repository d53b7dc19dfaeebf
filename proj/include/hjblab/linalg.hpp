#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace hjblab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline bool is_symmetric(const Mat& m, double rel_tol = 1e-12) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

/// Principal square root of a symmetric positive semidefinite matrix.
/// Negative eigenvalues from round-off are clipped at zero.
inline Mat sqrtm_psd(const Mat& m) {
  if (m.rows() == 1) return Mat::Constant(1, 1, std::sqrt(std::max(0.0, m(0, 0))));
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m));
  Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double min_eigenvalue(const Mat& m) {
  if (m.rows() == 1) return m(0, 0);
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Pairwise summation; the result depends only on the order of `xs`.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace hjblab
