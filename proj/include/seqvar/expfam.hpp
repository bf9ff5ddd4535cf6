#pragma once

#include "seqvar/common.hpp"
#include "seqvar/rng.hpp"

namespace seqvar {

// Number of coordinates of a flattened Gaussian natural parameter (eta1, vec eta2).
inline Eigen::Index natural_size(Eigen::Index d) { return d + d * d; }

// Flattened natural coordinates: eta1 followed by eta2 in row-major order.
Vec flatten_natural(const Vec& eta1, const Mat& eta2);

// Additive natural-parameter term. Carries no positive-definiteness requirement
// on its own; only the sum with a proper Gaussian has to be a density.
struct NaturalIncrement {
  Vec eta1;
  Mat eta2;

  static NaturalIncrement zero(Eigen::Index d) {
    return {Vec::Zero(d), Mat::Zero(d, d)};
  }
};

struct MeanGaussian {
  Vec mean;
  Mat cov;
};

// Gaussian density in natural parameters: eta1 = P m, eta2 = -P/2 with P the precision.
class NaturalGaussian {
 public:
  NaturalGaussian() = default;
  // Throws DegenerateKernelError when -2 eta2 is not positive definite.
  NaturalGaussian(Vec eta1, Mat eta2);

  static NaturalGaussian standard(Eigen::Index d);
  static NaturalGaussian from_flat(Eigen::Index d, const Vec& flat);

  Eigen::Index dim() const { return eta1_.size(); }
  const Vec& eta1() const { return eta1_; }
  const Mat& eta2() const { return eta2_; }
  const Vec& mean() const { return mean_; }
  const Mat& covariance() const { return cov_; }
  // Lower Cholesky factor of the precision -2 eta2.
  const Mat& precision_lower() const { return prec_lower_; }
  double log_det_precision() const { return log_det_prec_; }
  Vec flat() const { return flatten_natural(eta1_, eta2_); }

  double log_pdf(const Vec& x) const;
  // log-density of every row of `xs`.
  Vec log_pdf_rows(const RowMat& xs) const;
  Vec sample(Stream& rng) const;

  // Gradient of log_pdf(x) with respect to the flattened natural parameters:
  // (x - m, vec(x x^T - E[X X^T])).
  Vec score_natural(const Vec& x) const;
  // Gradient of the differential entropy with respect to the flattened natural
  // parameters: (0, vec(cov)).
  Vec entropy_gradient() const;
  double entropy() const;

 private:
  Vec eta1_;
  Mat eta2_;
  Mat prec_lower_;
  double log_det_prec_ = 0.0;
  Vec mean_;
  Mat cov_;
};

MeanGaussian to_mean(const NaturalGaussian& ng);
NaturalGaussian to_natural(const MeanGaussian& mg);

// Normalized product of `a` with exp(inc . T(x)); the natural parameters add.
NaturalGaussian add_natural(const NaturalGaussian& a, const NaturalIncrement& inc);

}  // namespace seqvar
