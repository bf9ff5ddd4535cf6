#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "seqvar/common.hpp"
#include "seqvar/elbo.hpp"
#include "seqvar/varfamily.hpp"

namespace seqvar {

enum class ScheduleKind { kConstant, kInverseSqrt, kAdam };

std::string schedule_name(ScheduleKind k);
ScheduleKind schedule_from_name(const std::string& name);

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::kConstant;
  double base_rate = 1e-3;
  // inverse_sqrt: rate_k = base_rate / sqrt(1 + k / decay_steps).
  double decay_steps = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global-norm clipping of every ascent direction; <= 0 turns it off.
  double clip_norm = 10.0;

  void validate() const;
  nlohmann::json to_json() const;
  static ScheduleConfig from_json(const nlohmann::json& j);
};

// Rescales g to norm at most max_norm. Never flips a sign.
Vec clip_global_norm(const Vec& g, double max_norm);

class StepSchedule {
 public:
  explicit StepSchedule(ScheduleConfig config = {});

  const ScheduleConfig& config() const { return config_; }
  long steps() const { return steps_; }
  // Rate applied by the next call to increment().
  double rate() const;
  // Parameter displacement for an ascent direction; advances the step counter.
  Vec increment(const Vec& direction);

  nlohmann::json state_json() const;
  void restore(const nlohmann::json& state);

 private:
  ScheduleConfig config_;
  long steps_ = 0;
  Vec m_;
  Vec v_;
};

struct DriverState {
  Vec lambda;
  StepSchedule schedule;
};

// lambda += rate * grad.
const Vec& offline_epoch(DriverState& s, const GradientEstimate& grad);
// lambda += rate * (grad_t - grad_tm1); a null grad_tm1 stands for a zero
// gradient (first step of a sequence).
const Vec& recursive_epoch_step(DriverState& s, const GradientEstimate& grad_t,
                                const GradientEstimate* grad_tm1);
// Streaming form of the same update, grad_tm1 cached at the stale iterate.
const Vec& online_step(DriverState& s, const GradientEstimate& grad_t,
                       const GradientEstimate* grad_tm1);

// Dense full-length form of a (possibly block-restricted) gradient.
Vec expand_gradient(const GradientEstimate& g, Eigen::Index size);

// Training state on disk. Doubles are written as shortest round-trip decimals,
// so reading a checkpoint back is bitwise exact.
struct Checkpoint {
  nlohmann::json info;  // mode, progress counters, configuration echo
  Vec lambda;
  nlohmann::json schedule;
  std::optional<GradientEstimate> grad_prev;
  // Streaming position: estimator time, particle cloud and family state.
  std::optional<int> stream_t;
  std::optional<ParticleCloud> cloud;
  std::optional<FamilyState> family_state;
};

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
// Written to a temporary file and renamed into place.
void write_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

nlohmann::json cloud_to_json(const ParticleCloud& c);
ParticleCloud cloud_from_json(const nlohmann::json& j);
nlohmann::json family_state_to_json(const FamilyState& s);
FamilyState family_state_from_json(const nlohmann::json& j);

}  // namespace seqvar
