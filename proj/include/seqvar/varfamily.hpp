#pragma once

#include <deque>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqvar/common.hpp"
#include "seqvar/expfam.hpp"
#include "seqvar/models.hpp"
#include "seqvar/nn.hpp"
#include "seqvar/rng.hpp"

namespace seqvar {

// How the marginals q_t and forward potentials are parameterized.
//  - kConjugate: q_t = predict(q_{t-1}; A, Q) + observation increment, backward
//    kernels from the shared linear-Gaussian transition. With a linear increment
//    map this family contains the exact LGSSM smoother ("lgssm_closed_form").
//  - kAmortized: recurrent carrier a_t = MLP(a_{t-1}, y_t), q_t = MLP(a_t),
//    potential eta1 = MLP(x_t).
//  - kNonAmortized: one disjoint parameter slot per time step.
enum class Scheme { kConjugate, kAmortized, kNonAmortized };

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

struct FamilyConfig {
  Scheme scheme = Scheme::kConjugate;
  Eigen::Index dim_x = 1;
  Eigen::Index dim_y = 1;
  // Truncated backpropagation depth; carriers older than this are constants.
  int truncation = 2;
  // Hidden widths of the observation-increment map (conjugate scheme).
  std::vector<Eigen::Index> obs_hidden;
  // Amortized scheme. carrier_dim = 0 selects 2 * dim_x.
  Eigen::Index carrier_dim = 0;
  std::vector<Eigen::Index> carrier_hidden{32};
  std::vector<Eigen::Index> marginal_hidden{32};
  std::vector<Eigen::Index> potential_hidden{32};
  // Non-amortized scheme potential network.
  std::vector<Eigen::Index> slot_potential_hidden{100};
  // eta2 of MLP potentials is -L L^T - jitter I.
  double potential_jitter = 1e-6;
  // Conjugate starting point: A = gain * I, transition noise std * I. With
  // init_obs_std > 0 (and dim_x == dim_y) the increment map starts as the
  // identity observation with that noise level instead of a random map.
  double init_transition_gain = 0.5;
  double init_transition_std = 0.5;
  double init_obs_std = 0.0;

  nlohmann::json to_json() const;
  static FamilyConfig from_json(const nlohmann::json& j);
};

struct ParamBlock {
  Eigen::Index offset = 0;
  Eigen::Index size = 0;

  bool operator==(const ParamBlock&) const = default;
};

// Named, contiguous partition of the flat parameter vector.
class ParamLayout {
 public:
  struct Entry {
    std::string name;
    ParamBlock block;
  };

  ParamBlock add(const std::string& name, Eigen::Index size);
  const ParamBlock& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  Eigen::Index size() const { return size_; }
  const std::vector<Entry>& entries() const { return entries_; }
  nlohmann::json to_json() const;

 private:
  std::vector<Entry> entries_;
  Eigen::Index size_ = 0;
};

// Packed lower-triangular factors (row-wise packing), optionally with a softplus
// diagonal so that L L^T stays positive definite.
namespace trifactor {
Eigen::Index packed_size(Eigen::Index d);
Mat unpack(const double* raw, Eigen::Index d, bool softplus_diag);
// Derivative of unpack() along packed coordinate k.
Mat tangent(const double* raw, Eigen::Index d, Eigen::Index k, bool softplus_diag);
void pack(const Mat& lower, double* raw, bool softplus_diag);
// Pulls a gradient with respect to L back to the packed coordinates (accumulates).
void pullback(const Mat& grad_lower, const double* raw, Eigen::Index d, bool softplus_diag,
              double* grad_raw);
}  // namespace trifactor

// Linearization of one carrier update c_s = F(c_{s-1}, lambda):
// direct = dF/dlambda (c_{s-1} fixed), transition = dF/dc_{s-1}.
struct JacobianTerm {
  Mat direct;
  Mat transition;
};

// Recurrent state carried from step t-1 to step t.
struct FamilyState {
  int t = -1;
  Vec carrier;
  // Most recent first; at most `truncation` entries.
  std::deque<JacobianTerm> window;
};

struct StepOutput {
  FamilyState state;
  NaturalGaussian q;
  // d eta_t / d lambda restricted to `block`, rows in flattened natural order.
  Mat q_jacobian;
  ParamBlock block;
};

// Forward potential psi_t(x_{t-1}, x_t) = exp(eta1(x_t) . x_{t-1} + x_{t-1}^T eta2 x_{t-1}).
// The quadratic block eta2 does not depend on x_t.
class Potential {
 public:
  virtual ~Potential() = default;

  Eigen::Index dim() const { return eta2_.rows(); }
  const Mat& eta2() const { return eta2_; }
  const ParamBlock& block() const { return block_; }

  virtual Vec eta1(const Vec& x_t) const = 0;
  virtual RowMat eta1_rows(const RowMat& xs) const;
  NaturalIncrement increment(const Vec& x_t) const { return {eta1(x_t), eta2_}; }
  double log_value(const Vec& x_prev, const Vec& x_t) const;

  // grads.row(i) += d/dlambda <upstream.row(i), flat(eta1(x_i), eta2)>, in block coordinates.
  virtual void vjp_rows(const RowMat& xs, const RowMat& upstream, RowMat& grads) const = 0;

  // True when eta1 is an affine function of x_t: eta1(x) = linear() x + offset().
  virtual bool is_linear() const { return false; }
  virtual Mat linear() const { return {}; }
  virtual Vec offset() const { return {}; }

 protected:
  Mat eta2_;
  ParamBlock block_;
};

class VariationalFamily {
 public:
  explicit VariationalFamily(FamilyConfig config) : config_(std::move(config)) {}
  virtual ~VariationalFamily() = default;

  const FamilyConfig& config() const { return config_; }
  Scheme scheme() const { return config_.scheme; }
  Eigen::Index dim() const { return config_.dim_x; }
  // Layout of the shared parameters (one slot for the non-amortized scheme).
  const ParamLayout& layout() const { return layout_; }

  // Length of lambda needed to process observations 0..horizon.
  virtual Eigen::Index num_params(int /*horizon*/) const { return layout_.size(); }
  virtual Vec initial_parameters(Stream& rng, int horizon) const = 0;
  // Whether gradients at different steps live in the same coordinates.
  virtual bool shares_parameters() const { return true; }
  // Grows lambda so that step t has parameters (non-amortized only).
  virtual void ensure_capacity(Vec& lambda, int t) const;

  virtual StepOutput step(const Vec& lambda, const FamilyState* prev, const Vec& y, int t) const = 0;
  // Forward potential linking q_{t-1} and the backward kernel at t (t >= 1).
  virtual std::unique_ptr<Potential> potential(const Vec& lambda, int t) const = 0;

  // q_{t-1|t}(x_t, .) = q_{t-1} (+) potential(x_t).
  static NaturalGaussian backward_kernel(const NaturalGaussian& q_prev, const Potential& pot,
                                         const Vec& x_t);

 protected:
  FamilyConfig config_;
  ParamLayout layout_;
};

class ConjugateFamily final : public VariationalFamily {
 public:
  explicit ConjugateFamily(FamilyConfig config);

  const Mlp& obs_map() const { return obs_map_; }
  bool linear_observation_map() const { return config_.obs_hidden.empty(); }

  Vec initial_parameters(Stream& rng, int horizon) const override;
  StepOutput step(const Vec& lambda, const FamilyState* prev, const Vec& y, int t) const override;
  std::unique_ptr<Potential> potential(const Vec& lambda, int t) const override;

  // Parameters under which q_t is the Kalman filter and the backward kernels are
  // exact, so that q_{0:T} is the exact smoothing distribution.
  Vec exact_parameters(const LgssmParams& model) const;

  Mat transition_matrix(const Vec& lambda) const;
  Mat transition_cov(const Vec& lambda) const;

 private:
  Mlp obs_map_;
};

class AmortizedFamily final : public VariationalFamily {
 public:
  explicit AmortizedFamily(FamilyConfig config);

  Eigen::Index carrier_dim() const { return carrier_dim_; }
  const Mlp& carrier_map() const { return carrier_map_; }
  const Mlp& marginal_map() const { return marginal_map_; }
  const Mlp& potential_map() const { return potential_map_; }

  Vec initial_parameters(Stream& rng, int horizon) const override;
  StepOutput step(const Vec& lambda, const FamilyState* prev, const Vec& y, int t) const override;
  std::unique_ptr<Potential> potential(const Vec& lambda, int t) const override;

  // Untruncated forward recomputation of eta_t (flat) from a given carrier
  // a_{t-k-1} through observations y_{t-k..t}. Used by gradient checks.
  Vec unrolled_eta(const Vec& lambda, const Vec& carrier_before, const std::vector<Vec>& ys) const;

 private:
  Eigen::Index carrier_dim_ = 0;
  Mlp carrier_map_;
  Mlp marginal_map_;
  Mlp potential_map_;
};

class NonAmortizedFamily final : public VariationalFamily {
 public:
  explicit NonAmortizedFamily(FamilyConfig config);

  const Mlp& potential_map() const { return potential_map_; }
  Eigen::Index slot_size() const { return layout_.size(); }
  ParamBlock slot(int t) const;

  Eigen::Index num_params(int horizon) const override;
  Vec initial_parameters(Stream& rng, int horizon) const override;
  bool shares_parameters() const override { return false; }
  void ensure_capacity(Vec& lambda, int t) const override;
  StepOutput step(const Vec& lambda, const FamilyState* prev, const Vec& y, int t) const override;
  std::unique_ptr<Potential> potential(const Vec& lambda, int t) const override;

 private:
  Mlp potential_map_;
};

std::unique_ptr<VariationalFamily> make_family(const FamilyConfig& config);

// (q_t, kernels) for a whole sequence under a frozen lambda.
struct FilterPass {
  std::vector<NaturalGaussian> marginals;
  std::vector<std::unique_ptr<Potential>> potentials;  // index t (entry 0 empty)
};
FilterPass run_filter(const VariationalFamily& family, const Vec& lambda, const RowMat& ys);

// E_{q_{0:T}}[X_t] for every t. Exact when potentials are affine; otherwise
// estimated from `paths` backward-sampled trajectories.
RowMat smoothing_means(const FilterPass& pass, int paths, std::uint64_t seed);
// E_{q_t}[X_t].
RowMat filtering_means(const FilterPass& pass);

}  // namespace seqvar
