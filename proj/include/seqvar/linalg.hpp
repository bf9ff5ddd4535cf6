#pragma once

#include <cmath>
#include <numbers>

#include "seqvar/common.hpp"

namespace seqvar {

// Symmetric positive-definite matrix with its Cholesky factor cached.
class Covariance {
 public:
  Covariance() = default;
  explicit Covariance(const Mat& cov);

  Eigen::Index dim() const { return cov_.rows(); }
  const Mat& matrix() const { return cov_; }
  const Mat& lower() const { return lower_; }
  double log_det() const { return log_det_; }

  // log N(diff; 0, cov).
  double log_density(const Vec& diff) const;
  // Squared Mahalanobis norm of each row of `diffs`.
  Vec mahalanobis_rows(const RowMat& diffs) const;
  // L^{-1} v.
  Vec whiten(const Vec& v) const;
  Mat inverse() const;

 private:
  Mat cov_;
  Mat lower_;
  double log_det_ = 0.0;
};

inline double log_two_pi() { return std::log(2.0 * std::numbers::pi); }

// Stable log(1 + exp(x)) and its inverse.
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

// Symmetric square root of a positive semi-definite matrix.
Mat psd_sqrt(const Mat& m);

}  // namespace seqvar
