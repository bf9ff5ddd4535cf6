#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "seqvar/common.hpp"
#include "seqvar/linalg.hpp"
#include "seqvar/rng.hpp"

namespace seqvar {

struct LgssmParams {
  Vec mu0;
  Mat Q0;
  Mat A;
  Mat B;
  Mat Q;
  Mat R;

  Eigen::Index dim_x() const { return A.rows(); }
  Eigen::Index dim_y() const { return B.rows(); }
  // Checks dimensions and that Q0, Q, R are symmetric positive definite.
  void validate() const;
};

struct ChaoticRnnParams {
  Mat W;
  double step = 0.001;
  double tau = 0.025;
  double gain = 2.5;
  Mat Q;
  double student_dof = 2.0;
  double student_scale = 0.1;

  Eigen::Index dim_x() const { return W.rows(); }
  void validate() const;
};

struct Trajectory {
  RowMat states;        // (T+1) x d_x
  RowMat observations;  // (T+1) x d_y
  std::uint64_t seed = 0;

  Eigen::Index length() const { return states.rows(); }
  Vec y(Eigen::Index t) const { return observations.row(t).transpose(); }
  Vec x(Eigen::Index t) const { return states.row(t).transpose(); }
};

enum class ModelKind { kLgssm, kChaoticRnn };

// Additive Gaussian noise. Sampling accepts positive semi-definite covariances
// (zero noise is a valid degenerate model); densities need positive definite ones.
class GaussianNoise {
 public:
  GaussianNoise() = default;
  explicit GaussianNoise(const Mat& cov);

  const Mat& matrix() const { return cov_; }
  bool is_definite() const { return density_.has_value(); }
  // Throws ParameterError when the covariance is singular.
  const Covariance& density() const;
  Vec sample(Stream& rng) const;

 private:
  Mat cov_;
  Mat factor_;
  std::optional<Covariance> density_;
};

// State-space model with additive Gaussian transition noise:
// X_t = f(X_{t-1}) + nu_t, and an arbitrary emission density m(x_t, y_t).
class SsmModel {
 public:
  virtual ~SsmModel() = default;

  virtual ModelKind kind() const = 0;
  virtual Eigen::Index state_dim() const = 0;
  virtual Eigen::Index obs_dim() const = 0;

  virtual double log_initial(const Vec& x) const = 0;
  virtual Vec transition_mean(const Vec& x_prev) const = 0;
  virtual double log_emission(const Vec& x, const Vec& y) const = 0;
  virtual Vec sample_initial(Stream& rng) const = 0;
  virtual Vec sample_emission(const Vec& x, Stream& rng) const = 0;
  virtual nlohmann::json to_json() const = 0;

  const GaussianNoise& transition_noise() const { return transition_noise_; }

  double log_transition(const Vec& x_prev, const Vec& x) const;
  Vec sample_transition(const Vec& x_prev, Stream& rng) const;

  // log l_t: log chi(x) + log m(x, y) at t = 0 (x_prev must be null), and
  // log h(x_prev, x) + log m(x, y) for t >= 1.
  double log_ell(int t, const Vec* x_prev, const Vec& x, const Vec& y) const;

  // Row-batched helpers. transition_mean_rows maps each row of x_prev.
  virtual RowMat transition_mean_rows(const RowMat& x_prev) const;
  virtual Vec log_emission_rows(const RowMat& xs, const Vec& y) const;
  // Entry (i, j) = log h(x_prev.row(j), x.row(i)).
  Mat log_transition_matrix(const RowMat& x_prev, const RowMat& x) const;

  // Transition means of a fixed cloud whitened by the noise factor, so that many
  // log h(x_prev_j, .) evaluations reduce to inner products.
  struct WhitenedMeans {
    Mat w;   // d x N, column j = L^{-1} f(x_prev_j)
    Vec sq;  // squared norms of the columns
    double log_norm = 0.0;
  };
  WhitenedMeans whiten_transition_means(const RowMat& x_prev) const;
  // Whitened states as columns (d x M).
  Mat whiten_states(const RowMat& x) const;
  Mat log_transition_matrix(const WhitenedMeans& prev, const Mat& wx) const;

 protected:
  GaussianNoise transition_noise_;
};

class LgssmModel final : public SsmModel {
 public:
  explicit LgssmModel(LgssmParams params);

  const LgssmParams& params() const { return params_; }
  ModelKind kind() const override { return ModelKind::kLgssm; }
  Eigen::Index state_dim() const override { return params_.dim_x(); }
  Eigen::Index obs_dim() const override { return params_.dim_y(); }

  double log_initial(const Vec& x) const override;
  Vec transition_mean(const Vec& x_prev) const override;
  double log_emission(const Vec& x, const Vec& y) const override;
  Vec sample_initial(Stream& rng) const override;
  Vec sample_emission(const Vec& x, Stream& rng) const override;
  nlohmann::json to_json() const override;

  RowMat transition_mean_rows(const RowMat& x_prev) const override;
  Vec log_emission_rows(const RowMat& xs, const Vec& y) const override;

 private:
  LgssmParams params_;
  GaussianNoise initial_;
  GaussianNoise emission_;
};

// X_t = X_{t-1} + (step/tau) (gain W tanh(X_{t-1}) - X_{t-1}) + nu_t,  X_0 ~ N(0, Q),
// Y_t = X_t + eps_t with independent Student-t coordinates.
class ChaoticRnnModel final : public SsmModel {
 public:
  explicit ChaoticRnnModel(ChaoticRnnParams params);

  const ChaoticRnnParams& params() const { return params_; }
  ModelKind kind() const override { return ModelKind::kChaoticRnn; }
  Eigen::Index state_dim() const override { return params_.dim_x(); }
  Eigen::Index obs_dim() const override { return params_.dim_x(); }

  double log_initial(const Vec& x) const override;
  Vec transition_mean(const Vec& x_prev) const override;
  double log_emission(const Vec& x, const Vec& y) const override;
  Vec sample_initial(Stream& rng) const override;
  Vec sample_emission(const Vec& x, Stream& rng) const override;
  nlohmann::json to_json() const override;

  RowMat transition_mean_rows(const RowMat& x_prev) const override;
  Vec log_emission_rows(const RowMat& xs, const Vec& y) const override;

 private:
  ChaoticRnnParams params_;
  double student_log_norm_ = 0.0;
};

// Log-density of a scaled Student-t variable at z.
double student_t_log_pdf(double z, double dof, double scale);

Trajectory simulate(const SsmModel& model, int T, std::uint64_t seed);

// Randomly drawn, stable linear-Gaussian model.
LgssmParams random_lgssm(Eigen::Index dim_x, Eigen::Index dim_y, std::uint64_t seed);
// Chaotic RNN with W_ij ~ N(0, 1/d) and the standard hyperparameters.
ChaoticRnnParams random_chaotic_rnn(Eigen::Index dim, std::uint64_t seed);

// JSON (de)serialization. Matrices are {"rows", "cols", "data"} with row-major data.
nlohmann::json matrix_to_json(const Mat& m);
Mat matrix_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Vec& v);
Vec vector_from_json(const nlohmann::json& j);

std::unique_ptr<SsmModel> model_from_json(const nlohmann::json& j);

void write_trajectory_csv(const Trajectory& traj, const std::string& path);
Trajectory read_trajectory_csv(const std::string& path, Eigen::Index dim_x, Eigen::Index dim_y);

}  // namespace seqvar
