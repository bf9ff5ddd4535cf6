#include "seqvar/expfam.hpp"

#include <cmath>
#include <numbers>

#include "seqvar/linalg.hpp"

namespace seqvar {

Vec flatten_natural(const Vec& eta1, const Mat& eta2) {
  const Eigen::Index d = eta1.size();
  Vec out(natural_size(d));
  out.head(d) = eta1;
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) out[d + a * d + b] = eta2(a, b);
  }
  return out;
}

NaturalGaussian::NaturalGaussian(Vec eta1, Mat eta2) : eta1_(std::move(eta1)) {
  const Eigen::Index d = eta1_.size();
  require(eta2.rows() == d && eta2.cols() == d, "NaturalGaussian: eta2 must be d x d");
  eta2_ = symmetrize(eta2);
  Eigen::LLT<Mat> llt(-2.0 * eta2_);
  if (llt.info() != Eigen::Success) {
    throw DegenerateKernelError("kernel degenerate: -2 eta2 is not positive definite");
  }
  prec_lower_ = llt.matrixL();
  log_det_prec_ = 2.0 * prec_lower_.diagonal().array().log().sum();
  if (!std::isfinite(log_det_prec_) || !eta1_.allFinite()) {
    throw DegenerateKernelError("kernel degenerate: non-finite natural parameters");
  }
  mean_ = llt.solve(eta1_);
  cov_ = Mat::Identity(d, d);
  llt.solveInPlace(cov_);
  cov_ = symmetrize(cov_);
}

NaturalGaussian NaturalGaussian::standard(Eigen::Index d) {
  return NaturalGaussian(Vec::Zero(d), -0.5 * Mat::Identity(d, d));
}

NaturalGaussian NaturalGaussian::from_flat(Eigen::Index d, const Vec& flat) {
  require_dim(flat.size(), natural_size(d), "NaturalGaussian::from_flat");
  Mat eta2(d, d);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) eta2(a, b) = flat[d + a * d + b];
  }
  return NaturalGaussian(flat.head(d), eta2);
}

double NaturalGaussian::log_pdf(const Vec& x) const {
  require_dim(x.size(), dim(), "NaturalGaussian::log_pdf");
  const Vec z = prec_lower_.transpose() * (x - mean_);
  return -0.5 * z.squaredNorm() + 0.5 * log_det_prec_ -
         0.5 * static_cast<double>(dim()) * log_two_pi();
}

Vec NaturalGaussian::log_pdf_rows(const RowMat& xs) const {
  require_dim(xs.cols(), dim(), "NaturalGaussian::log_pdf_rows");
  const Mat centered = xs.rowwise() - mean_.transpose();
  const Mat z = centered * prec_lower_;
  const double c = 0.5 * log_det_prec_ - 0.5 * static_cast<double>(dim()) * log_two_pi();
  return (-0.5 * z.rowwise().squaredNorm()).array() + c;
}

Vec NaturalGaussian::sample(Stream& rng) const {
  const Vec z = rng.normal_vector(dim());
  // cov = L^{-T} L^{-1} for precision L L^T.
  return mean_ + prec_lower_.transpose().triangularView<Eigen::Upper>().solve(z);
}

Vec NaturalGaussian::score_natural(const Vec& x) const {
  require_dim(x.size(), dim(), "NaturalGaussian::score_natural");
  const Mat second = x * x.transpose() - cov_ - mean_ * mean_.transpose();
  return flatten_natural(x - mean_, second);
}

Vec NaturalGaussian::entropy_gradient() const {
  return flatten_natural(Vec::Zero(dim()), cov_);
}

double NaturalGaussian::entropy() const {
  const double d = static_cast<double>(dim());
  return 0.5 * (d * (1.0 + log_two_pi()) - log_det_prec_);
}

MeanGaussian to_mean(const NaturalGaussian& ng) { return {ng.mean(), ng.covariance()}; }

NaturalGaussian to_natural(const MeanGaussian& mg) {
  const Covariance cov(mg.cov);
  const Mat precision = cov.inverse();
  return NaturalGaussian(precision * mg.mean, -0.5 * precision);
}

NaturalGaussian add_natural(const NaturalGaussian& a, const NaturalIncrement& inc) {
  require_dim(inc.eta1.size(), a.dim(), "add_natural");
  return NaturalGaussian(a.eta1() + inc.eta1, a.eta2() + inc.eta2);
}

}  // namespace seqvar
