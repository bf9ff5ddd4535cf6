#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "seqvar/common.hpp"
#include "seqvar/elbo.hpp"
#include "seqvar/models.hpp"
#include "seqvar/varfamily.hpp"

namespace seqvar {

struct GaussianBelief {
  Vec mean;
  Mat cov;
};

// Filtering marginals p(x_t | y_{0:t}); Joseph-form covariance updates.
std::vector<GaussianBelief> kalman_filter(const LgssmParams& params, const RowMat& ys);
// Smoothing marginals p(x_t | y_{0:T}) from the filter output.
std::vector<GaussianBelief> rts_smoother(const LgssmParams& params,
                                         const std::vector<GaussianBelief>& filtered);
// log p(y_{0:T}) by the innovations decomposition.
double kalman_log_likelihood(const LgssmParams& params, const RowMat& ys);
// Law of X_{t-1} given X_t = x_t and y_{0:t-1}.
GaussianBelief kalman_backward_kernel(const LgssmParams& params, const GaussianBelief& filt_prev,
                                      const Vec& x_t);

// E[X_{t-1} | X_t, y_{0:t}] averaged over the filtering law at t, for t >= 1
// (row t-1 of the result).
RowMat kalman_one_step_means(const LgssmParams& params, const std::vector<GaussianBelief>& filtered);

// Exact ELBO of a conjugate family on an LGSSM: H_t is a quadratic form whose
// coefficients propagate in closed form.
double closed_form_elbo(const ConjugateFamily& family, const Vec& lambda, const LgssmParams& params,
                        const RowMat& ys);
// Same value with its exact gradient in lambda (forward-mode differentiation).
std::pair<double, Vec> closed_form_elbo_and_grad(const ConjugateFamily& family, const Vec& lambda,
                                                 const LgssmParams& params, const RowMat& ys);

// Pathwise Monte Carlo baseline: N trajectories drawn backward from q_T through
// the kernels as location-scale transforms of fixed normals; the gradient
// differentiates that sampler.
GradientEstimate backward_mc_elbo_grad(const ConjugateFamily& family, const Vec& lambda,
                                       const SsmModel& model, const RowMat& ys, Eigen::Index N,
                                       std::uint64_t seed, bool with_gradient = true);
// Per-path log p(x, y) - log q(x) values of the same sampler.
Vec backward_mc_log_ratios(const ConjugateFamily& family, const Vec& lambda, const SsmModel& model,
                           const RowMat& ys, Eigen::Index N, std::uint64_t seed);

void write_beliefs_csv(const std::vector<GaussianBelief>& beliefs, const std::string& path);

}  // namespace seqvar
