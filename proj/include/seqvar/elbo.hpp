#pragma once

#include <cstdint>
#include <optional>

#include <nlohmann/json.hpp>

#include "seqvar/common.hpp"
#include "seqvar/expfam.hpp"
#include "seqvar/models.hpp"
#include "seqvar/varfamily.hpp"

namespace seqvar {

// Which parameters differentiate log q_t in the final score term of an online
// step: the ones that produced the cloud, or the previous iterate.
enum class ScoreLambda { kCurrent, kPrevious };

struct EstimatorOptions {
  // Baseline the final score term with the other particles' mean of H.
  // The recursion always centers its kernel-score terms.
  bool control_variate = true;
  // Skip the G recursion entirely (H and ELBO only).
  bool compute_gradient = true;
  // Add the gradient of the entropy of q_t in closed form. The score-only form
  // drops the -log q_t part of the integrand and is biased without it.
  bool analytic_entropy = true;
  // Replace the sampled -log q_{t-1|t} term of every increment by the exact
  // entropy of the (Gaussian) backward kernel. Without it the particle estimate
  // is biased upward once kernels get narrow relative to the cloud, and training
  // can chase that bias.
  bool kernel_entropy = true;
  int workers = 1;
  // Rows per work unit; fixed so results do not depend on the worker count.
  Eigen::Index block_rows = 128;
  // Rejection trials per backward draw before falling back to exact sampling.
  int max_trials_per_draw = 1000;
};

// Samples from q_t with the backward statistics attached to each of them.
struct ParticleCloud {
  int t = 0;
  RowMat xi;    // N x d
  Vec H;        // N
  RowMat G;     // N x block.size (empty when gradients are off)
  Vec logq;     // log q_t(xi)
  NaturalGaussian q;
  Mat q_jacobian;
  ParamBlock block;
  // Diagnostics of the step that produced the cloud.
  double ess_min = 0.0;
  double acc_rate = 1.0;
  // Particle average of E[X_{t-1} | xi_t^i]: the one-step smoothing mean.
  Vec one_step_mean;

  Eigen::Index size() const { return xi.rows(); }
};

struct GradientEstimate {
  Vec grad;
  ParamBlock block;
  double elbo = 0.0;
  int t = 0;
  Eigen::Index N = 0;
  int M = 0;  // 0: full SNIS sums
  double ess_min = 0.0;
  double acc_rate = 1.0;

  double grad_norm() const { return grad.norm(); }
  nlohmann::json diagnostics() const;
};

// h_0 = log l_0(x) and h_t = log l_t(x_prev, x) - log q_{t-1|t}(x, x_prev).
double h_increment(const SsmModel& model, const Vec& x, const Vec& y);
double h_increment(const SsmModel& model, const NaturalGaussian& q_prev, const Potential& pot, int t,
                   const Vec& x_prev, const Vec& x, const Vec& y);

ParticleCloud init_cloud(const StepOutput& step, const SsmModel& model, const Vec& y0,
                         Eigen::Index N, std::uint64_t seed, const EstimatorOptions& opts = {});

// Normalized backward weights of x_t over the previous cloud.
Vec snis_weights(const ParticleCloud& prev, const Potential& pot, const Vec& x_t);

// One O(N^2) step of the SNIS recursion. `step` and `pot` describe q_t and psi_t.
ParticleCloud propagate_full(const ParticleCloud& prev, const StepOutput& step, const Potential& pot,
                             const SsmModel& model, const Vec& y, Eigen::Index N,
                             std::uint64_t seed, const EstimatorOptions& opts = {});

// Same step with M backward draws per particle by rejection sampling.
ParticleCloud propagate_backward_sampled(const ParticleCloud& prev, const StepOutput& step,
                                         const Potential& pot, const SsmModel& model,
                                         const Vec& y, Eigen::Index N, int M, std::uint64_t seed,
                                         const EstimatorOptions& opts = {});

GradientEstimate finalize(const ParticleCloud& cloud, const EstimatorOptions& opts = {});
// Score term evaluated with a different q_t (and its Jacobian) than the cloud's.
GradientEstimate finalize(const ParticleCloud& cloud, const NaturalGaussian& q_score,
                          const Mat& q_jacobian, const EstimatorOptions& opts = {});

struct SamplerConfig {
  Eigen::Index N = 100;
  int M = 0;  // 0: full sums
  std::uint64_t seed = 0;
};

// Streams observations one at a time. evaluate() computes the statistics at the
// next time step without committing, so the same step can be re-evaluated under
// new parameters; commit() accepts the last evaluation.
class OnlineEstimator {
 public:
  OnlineEstimator(const VariationalFamily& family, const SsmModel& model, SamplerConfig sampler,
                  EstimatorOptions opts = {});

  int next_t() const { return t_; }
  const ParticleCloud* cloud() const { return has_cloud_ ? &cloud_ : nullptr; }
  const FamilyState* family_state() const { return has_cloud_ ? &state_ : nullptr; }

  // `score_lambda` (optional) differentiates log q_t in the final score term.
  GradientEstimate evaluate(const Vec& lambda, const Vec& y, const Vec* score_lambda = nullptr);
  void commit();
  // Resumes at a saved position; the next evaluation is at time t.
  void restore(int t, ParticleCloud cloud, FamilyState state);
  GradientEstimate step(const Vec& lambda, const Vec& y, const Vec* score_lambda = nullptr) {
    GradientEstimate g = evaluate(lambda, y, score_lambda);
    commit();
    return g;
  }
 private:
  const VariationalFamily& family_;
  const SsmModel& model_;
  SamplerConfig sampler_;
  EstimatorOptions opts_;
  int t_ = 0;
  bool has_cloud_ = false;
  ParticleCloud cloud_;
  FamilyState state_;
  bool has_pending_ = false;
  ParticleCloud pending_cloud_;
  FamilyState pending_state_;
};

// ELBO and gradient estimate of a whole sequence under a frozen lambda.
GradientEstimate estimate_sequence(const VariationalFamily& family, const Vec& lambda,
                                   const SsmModel& model, const RowMat& ys,
                                   const SamplerConfig& sampler, const EstimatorOptions& opts = {});

}  // namespace seqvar
