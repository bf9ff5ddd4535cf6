#include "seqvar/linalg.hpp"

#include <Eigen/Eigenvalues>

namespace seqvar {

Covariance::Covariance(const Mat& cov) : cov_(symmetrize(cov)) {
  require(cov_.rows() == cov_.cols(), "covariance must be square");
  Eigen::LLT<Mat> llt(cov_);
  if (llt.info() != Eigen::Success) {
    throw ParameterError("covariance is not positive definite");
  }
  lower_ = llt.matrixL();
  log_det_ = 2.0 * lower_.diagonal().array().log().sum();
  if (!std::isfinite(log_det_)) throw ParameterError("covariance is not positive definite");
}

double Covariance::log_density(const Vec& diff) const {
  require_dim(diff.size(), dim(), "Covariance::log_density");
  const Vec z = whiten(diff);
  return -0.5 * (z.squaredNorm() + log_det_ + static_cast<double>(dim()) * log_two_pi());
}

Vec Covariance::mahalanobis_rows(const RowMat& diffs) const {
  // Solve L Z^T = D^T for all rows at once.
  const Mat z = lower_.triangularView<Eigen::Lower>().solve(diffs.transpose());
  return z.colwise().squaredNorm().transpose();
}

Vec Covariance::whiten(const Vec& v) const {
  return lower_.triangularView<Eigen::Lower>().solve(v);
}

Mat Covariance::inverse() const {
  Mat inv = Mat::Identity(dim(), dim());
  lower_.triangularView<Eigen::Lower>().solveInPlace(inv);
  lower_.transpose().triangularView<Eigen::Upper>().solveInPlace(inv);
  return symmetrize(inv);
}

Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m));
  const Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace seqvar
