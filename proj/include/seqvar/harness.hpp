#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqvar/common.hpp"
#include "seqvar/elbo.hpp"
#include "seqvar/models.hpp"
#include "seqvar/optim.hpp"
#include "seqvar/varfamily.hpp"

namespace seqvar {

// Bad or inconsistent experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { kOffline, kRecursiveEpoch, kOnline, kOracle, kBackwardMc };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

inline constexpr int kConfigSchema = 1;

struct ExperimentConfig {
  Mode mode = Mode::kOffline;
  // Model spec: explicit parameters, or {"kind", dims, "seed"} for a random instance.
  nlohmann::json model = {{"kind", "lgssm"}, {"dim_x", 2}, {"dim_y", 2}};
  FamilyConfig family;
  int T = 100;
  std::uint64_t seed = 0;
  // Trajectory CSV to train on instead of a simulated one.
  std::string data_path;

  Eigen::Index N = 100;
  int M = 0;
  EstimatorOptions estimator;
  ScheduleConfig schedule;

  int epochs = 100;
  // Gradient steps per time step (non-amortized scheme, online mode).
  int inner_steps = 1;
  // Frozen-lambda ELBO evaluation every k epochs (0: never).
  int eval_every = 0;
  // Finish with the evaluated iterate of highest frozen ELBO (needs eval_every > 0).
  bool keep_best = false;
  // Fresh sequences scored with the final lambda.
  int eval_sequences = 0;
  int eval_T = 0;  // 0: same as T
  Eigen::Index eval_N = 0;  // particles of frozen evaluations; 0: same as N
  // Backward-sampled paths for smoothing means when potentials are nonlinear.
  int smoothing_paths = 200;
  bool wall_clock = false;

  std::string out_dir = "out";
  int ckpt_every = 0;
  std::string resume;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

std::unique_ptr<SsmModel> build_model(const nlohmann::json& spec, std::uint64_t master_seed);

// Mean over rows of the per-row RMSE across coordinates.
double metric_smoothing_rmse(const RowMat& states, const RowMat& means);
// (kappa1, kappa2). one_step row t-1 estimates X_{t-1} from q_{t-1:t}, t = 1..T;
// filt row t estimates X_t from q_t.
std::pair<double, double> metric_onestep(const RowMat& states, const RowMat& one_step,
                                         const RowMat& filt);

// Everything computed from a frozen lambda on one sequence.
struct FrozenEvaluation {
  double elbo = 0.0;     // particle estimate of L_T
  RowMat smoothing;      // (T+1) x d
  RowMat filtering;      // (T+1) x d
  RowMat one_step;       // T x d
  double min_ess = 0.0;
};

FrozenEvaluation evaluate_frozen(const VariationalFamily& family, const Vec& lambda,
                                 const SsmModel& model, const RowMat& ys, Eigen::Index N, int M,
                                 std::uint64_t seed, const EstimatorOptions& opts,
                                 int smoothing_paths);

struct RunResult {
  Vec lambda;
  std::vector<nlohmann::json> metrics;
  std::vector<std::pair<std::string, std::string>> summary;
};

// Runs one experiment and writes metrics.jsonl, summary.csv and lambda.ckpt
// into config.out_dir. `on_row` sees every metric row as it is produced.
RunResult run_experiment(const ExperimentConfig& config,
                         const std::function<void(const nlohmann::json&)>& on_row = {});

// Simulated (or loaded) training data of a config.
Trajectory experiment_data(const ExperimentConfig& config, const SsmModel& model);

// Writes trajectory.csv and model.json.
void generate_data(const ExperimentConfig& config);

struct BenchRow {
  std::string estimator;
  Eigen::Index N = 0;
  int M = 0;
  double ms_per_step = 0.0;
};
// Per-step wall time of the estimators on the config's model.
std::vector<BenchRow> bench_steps(const ExperimentConfig& config, const std::vector<Eigen::Index>& ns,
                                  int reps);

}  // namespace seqvar
