#include "seqvar/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "seqvar/oracle.hpp"

namespace seqvar {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Salts separating the seeds derived from the master seed.
enum Salt : std::uint64_t {
  kModelSalt = 101,
  kDataSalt = 202,
  kEpochSalt = 303,
  kOnlineSalt = 404,
  kEvalSalt = 505,
  kFreshSalt = 606,
  kPathsSalt = 707,
};

std::uint64_t derive(std::uint64_t master, Salt salt, std::uint64_t k = 0) {
  return mix_seed(mix_seed(master, salt), k);
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

double now_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

bool closed_form_available(const VariationalFamily& family, const SsmModel& model) {
  return model.kind() == ModelKind::kLgssm && family.scheme() == Scheme::kConjugate &&
         static_cast<const ConjugateFamily&>(family).linear_observation_map();
}

// Frozen-lambda ELBO: exact when a closed form exists, otherwise a particle estimate
// with fixed randomness so successive evaluations are comparable.
double frozen_elbo(const VariationalFamily& family, const Vec& lambda, const SsmModel& model,
                   const RowMat& ys, const ExperimentConfig& cfg) {
  if (closed_form_available(family, model)) {
    return closed_form_elbo(static_cast<const ConjugateFamily&>(family), lambda,
                            static_cast<const LgssmModel&>(model).params(), ys);
  }
  EstimatorOptions opts = cfg.estimator;
  opts.compute_gradient = false;
  SamplerConfig sc{cfg.eval_N > 0 ? cfg.eval_N : cfg.N, cfg.M, derive(cfg.seed, kEvalSalt)};
  return estimate_sequence(family, lambda, model, ys, sc, opts).elbo;
}

// Configuration fields that determine the numbers (not where they go).
json core_config(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  for (const char* k : {"out_dir", "resume", "ckpt_every", "wall_clock"}) j.erase(k);
  return j;
}

class MetricsWriter {
 public:
  MetricsWriter(const fs::path& path, std::size_t keep_rows) : path_(path) {
    std::vector<std::string> kept;
    if (keep_rows > 0) {
      std::ifstream in(path);
      if (!in) throw IoError("cannot reopen " + path.string() + " to resume");
      std::string line;
      while (kept.size() < keep_rows && std::getline(in, line)) kept.push_back(line);
      if (kept.size() < keep_rows) throw IoError(path.string() + " has fewer rows than the checkpoint");
    }
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& l : kept) out_ << l << "\n";
    rows_ = kept.size();
  }

  void write(const json& row) {
    out_ << row.dump() << "\n";
    out_.flush();
    if (!out_) throw IoError("failed writing " + path_.string());
    ++rows_;
  }
  std::size_t rows() const { return rows_; }

 private:
  fs::path path_;
  std::ofstream out_;
  std::size_t rows_ = 0;
};

struct SequenceStats {
  double ess_min = std::numeric_limits<double>::quiet_NaN();
  double acc_sum = 0.0;
  int acc_count = 0;

  void add(const GradientEstimate& g) {
    if (std::isfinite(g.ess_min)) ess_min = std::isfinite(ess_min) ? std::min(ess_min, g.ess_min) : g.ess_min;
    if (std::isfinite(g.acc_rate)) {
      acc_sum += g.acc_rate;
      ++acc_count;
    }
  }
  double acc_rate() const {
    return acc_count > 0 ? acc_sum / acc_count : std::numeric_limits<double>::quiet_NaN();
  }
};

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const std::function<void(const json&)>& on_row)
      : cfg_(cfg), on_row_(on_row) {
    model_ = build_model(cfg_.model, cfg_.seed);
    FamilyConfig fc = cfg_.family;
    fc.dim_x = model_->state_dim();
    fc.dim_y = model_->obs_dim();
    family_ = make_family(fc);
    traj_ = experiment_data(cfg_, *model_);
    T_ = static_cast<int>(traj_.length()) - 1;
    Stream init(cfg_.seed, Purpose::kInit);
    ScheduleConfig sched = cfg_.schedule;
    if (cfg_.mode == Mode::kOracle) sched.clip_norm = 0.0;
    driver_.schedule = StepSchedule(sched);
    driver_.lambda = family_->initial_parameters(init, T_);
    out_ = cfg_.out_dir;
    fs::create_directories(out_);
  }

  RunResult run() {
    std::size_t keep_rows = 0;
    if (!cfg_.resume.empty()) keep_rows = load_resume();
    metrics_ = std::make_unique<MetricsWriter>(out_ / "metrics.jsonl", keep_rows);
    t0_ = now_ms();

    switch (cfg_.mode) {
      case Mode::kOffline:
      case Mode::kRecursiveEpoch:
      case Mode::kBackwardMc:
      case Mode::kOracle:
        if (cfg_.mode == Mode::kOracle) oracle_self_check();
        run_epochs();
        break;
      case Mode::kOnline:
        run_online();
        break;
    }
    if (cfg_.keep_best && best_epoch_ > 0) driver_.lambda = best_lambda_;
    finish();
    write_checkpoint(final_checkpoint(), (out_ / "lambda.ckpt").string());
    write_summary();
    result_.lambda = driver_.lambda;
    return std::move(result_);
  }

 private:
  // --------------------------------------------------------------- epochs
  void run_epochs() {
    for (int k = start_epoch_; k < cfg_.epochs; ++k) {
      const double t_start = now_ms();
      GradientEstimate g;
      SequenceStats stats;
      const std::uint64_t seed = derive(cfg_.seed, kEpochSalt, static_cast<std::uint64_t>(k));
      switch (cfg_.mode) {
        case Mode::kOffline: {
          OnlineEstimator est(*family_, *model_, {cfg_.N, cfg_.M, seed}, cfg_.estimator);
          for (int t = 0; t <= T_; ++t) {
            g = est.step(driver_.lambda, traj_.y(t));
            stats.add(g);
          }
          offline_epoch(driver_, g);
          break;
        }
        case Mode::kRecursiveEpoch: {
          OnlineEstimator est(*family_, *model_, {cfg_.N, cfg_.M, seed}, cfg_.estimator);
          std::optional<GradientEstimate> prev;
          for (int t = 0; t <= T_; ++t) {
            g = est.step(driver_.lambda, traj_.y(t));
            stats.add(g);
            recursive_epoch_step(driver_, g, prev ? &*prev : nullptr);
            prev = g;
          }
          break;
        }
        case Mode::kBackwardMc: {
          g = backward_mc_elbo_grad(conjugate(), driver_.lambda, *model_, traj_.observations, cfg_.N, seed);
          offline_epoch(driver_, g);
          break;
        }
        case Mode::kOracle: {
          const auto& fam = conjugate();
          auto [v, grad] = closed_form_elbo_and_grad(fam, driver_.lambda, lgssm(), traj_.observations);
          g.grad = std::move(grad);
          g.block = {0, driver_.lambda.size()};
          g.elbo = v;
          g.t = T_;
          g.ess_min = std::numeric_limits<double>::quiet_NaN();
          g.acc_rate = std::numeric_limits<double>::quiet_NaN();
          offline_epoch(driver_, g);
          break;
        }
        case Mode::kOnline:
          break;
      }
      json row = {{"epoch", k + 1}, {"t", T_}, {"elbo", num(g.elbo)}, {"grad_norm", num(g.grad_norm())},
                  {"ess_min", num(cfg_.mode == Mode::kOffline || cfg_.mode == Mode::kRecursiveEpoch
                                      ? stats.ess_min
                                      : g.ess_min)},
                  {"acc_rate", num(cfg_.mode == Mode::kOffline || cfg_.mode == Mode::kRecursiveEpoch
                                       ? stats.acc_rate()
                                       : g.acc_rate)}};
      if (cfg_.eval_every > 0 && (k + 1) % cfg_.eval_every == 0) {
        const double e = frozen_elbo(*family_, driver_.lambda, *model_, traj_.observations, cfg_);
        row["elbo_eval"] = num(e);
        if (cfg_.keep_best && std::isfinite(e) && !(e <= best_elbo_)) {
          best_elbo_ = e;
          best_epoch_ = k + 1;
          best_lambda_ = driver_.lambda;
        }
      }
      if (cfg_.wall_clock) row["wall_ms"] = now_ms() - t_start;
      emit(row);
      steps_done_ = k + 1;
      if (cfg_.ckpt_every > 0 && (k + 1) % cfg_.ckpt_every == 0) {
        Checkpoint c = base_checkpoint();
        c.info["epoch"] = k + 1;
        if (best_epoch_ > 0) {
          c.info["best"] = {{"epoch", best_epoch_}, {"elbo", best_elbo_},
                            {"lambda", std::vector<double>(best_lambda_.data(),
                                                           best_lambda_.data() + best_lambda_.size())}};
        }
        write_checkpoint(c, (out_ / "lambda.ckpt").string());
      }
    }
  }

  // --------------------------------------------------------------- streaming
  void run_online() {
    OnlineEstimator est(*family_, *model_, {cfg_.N, cfg_.M, derive(cfg_.seed, kOnlineSalt)},
                        cfg_.estimator);
    if (resume_) {
      if (resume_->cloud && resume_->family_state && resume_->stream_t) {
        est.restore(*resume_->stream_t, std::move(*resume_->cloud), std::move(*resume_->family_state));
      }
      prev_ = resume_->grad_prev;
    }
    const bool slots = !family_->shares_parameters();
    for (int t = est.next_t(); t <= T_; ++t) {
      const double t_start = now_ms();
      GradientEstimate g;
      const Vec y = traj_.y(t);
      if (slots) {
        // One parameter slot per step: a few ascent steps on it, then re-evaluate and commit.
        family_->ensure_capacity(driver_.lambda, t);
        for (int k = 0; k < cfg_.inner_steps; ++k) {
          g = est.evaluate(driver_.lambda, y);
          offline_epoch(driver_, g);
        }
        g = est.evaluate(driver_.lambda, y);
        est.commit();
      } else {
        g = est.step(driver_.lambda, y);
        online_step(driver_, g, prev_ ? &*prev_ : nullptr);
        prev_ = g;
      }
      json row = {{"t", t}, {"elbo", num(g.elbo)}, {"grad_norm", num(g.grad_norm())},
                  {"ess_min", num(g.ess_min)}, {"acc_rate", num(g.acc_rate)}};
      if (cfg_.wall_clock) row["wall_ms"] = now_ms() - t_start;
      emit(row);
      steps_done_ = t + 1;
      if (cfg_.ckpt_every > 0 && (t + 1) % cfg_.ckpt_every == 0 && t < T_) {
        Checkpoint c = base_checkpoint();
        c.info["t"] = t;
        c.stream_t = t + 1;
        c.cloud = *est.cloud();
        c.family_state = *est.family_state();
        c.grad_prev = prev_;
        write_checkpoint(c, (out_ / "lambda.ckpt").string());
      }
    }
  }

  // --------------------------------------------------------------- oracle
  void oracle_self_check() {
    const auto& fam = conjugate();
    const LgssmParams& p = lgssm();
    const Vec exact = fam.exact_parameters(p);
    const double ll = kalman_log_likelihood(p, traj_.observations);
    const double cf = closed_form_elbo(fam, exact, p, traj_.observations);
    const auto filt = kalman_filter(p, traj_.observations);
    const auto smooth = rts_smoother(p, filt);
    const RowMat means = smoothing_means(run_filter(fam, exact, traj_.observations), 1, 0);
    double dev = 0.0;
    for (std::size_t t = 0; t < smooth.size(); ++t) {
      dev = std::max(dev, (smooth[t].mean - means.row(static_cast<Eigen::Index>(t)).transpose())
                              .cwiseAbs()
                              .maxCoeff());
    }
    const double gap = std::abs(cf - ll);
    log_evidence_ = ll;
    oracle_gap_ = gap;
    oracle_dev_ = dev;
    write_beliefs_csv(smooth, (out_ / "smoother.csv").string());
    if (!(gap <= 1e-6 * std::max(1.0, std::abs(ll))) || !(dev <= 1e-6)) {
      throw NumericError("oracle self-check failed: |elbo - log p(y)| = " + fmt(gap) +
                         ", smoothing mean deviation = " + fmt(dev));
    }
  }

  // --------------------------------------------------------------- wrap-up
  void finish() {
    EstimatorOptions opts = cfg_.estimator;
    opts.compute_gradient = false;
    const FrozenEvaluation ev =
        evaluate_frozen(*family_, driver_.lambda, *model_, traj_.observations,
                        cfg_.eval_N > 0 ? cfg_.eval_N : cfg_.N, cfg_.M,
                        derive(cfg_.seed, kEvalSalt), opts, cfg_.smoothing_paths);
    const double elbo = closed_form_available(*family_, *model_)
                            ? frozen_elbo(*family_, driver_.lambda, *model_, traj_.observations, cfg_)
                            : ev.elbo;
    const auto [k1, k2] = metric_onestep(traj_.states, ev.one_step, ev.filtering);
    double eval_smooth = std::numeric_limits<double>::quiet_NaN();
    double eval_filt = std::numeric_limits<double>::quiet_NaN();
    if (cfg_.eval_sequences > 0 && family_->shares_parameters()) {
      double s = 0.0, f = 0.0;
      const int len = cfg_.eval_T > 0 ? cfg_.eval_T : T_;
      for (int k = 0; k < cfg_.eval_sequences; ++k) {
        const Trajectory fresh = simulate(*model_, len, derive(cfg_.seed, kFreshSalt, k));
        const FilterPass pass = run_filter(*family_, driver_.lambda, fresh.observations);
        const RowMat sm = smoothing_means(pass, cfg_.smoothing_paths, derive(cfg_.seed, kPathsSalt, k + 1));
        s += metric_smoothing_rmse(fresh.states, sm);
        f += metric_smoothing_rmse(fresh.states, filtering_means(pass));
      }
      eval_smooth = s / cfg_.eval_sequences;
      eval_filt = f / cfg_.eval_sequences;
    }

    auto& out = result_.summary;
    out = {{"mode", mode_name(cfg_.mode)},
           {"scheme", scheme_name(family_->scheme())},
           {"model", cfg_.model.value("kind", std::string())},
           {"seed", std::to_string(cfg_.seed)},
           {"T", std::to_string(T_)},
           {"N", std::to_string(cfg_.N)},
           {"M", std::to_string(cfg_.M)},
           {"steps", std::to_string(steps_done_)},
           {"best_epoch", std::to_string(best_epoch_)},
           {"elbo_final", fmt(elbo)},
           {"elbo_per_step", fmt(elbo / (T_ + 1))},
           {"smoothing_rmse", fmt(metric_smoothing_rmse(traj_.states, ev.smoothing))},
           {"filtering_rmse", fmt(metric_smoothing_rmse(traj_.states, ev.filtering))},
           {"kappa1", fmt(k1)},
           {"kappa2", fmt(k2)},
           {"eval_smoothing_rmse", fmt(eval_smooth)},
           {"eval_filtering_rmse", fmt(eval_filt)},
           {"log_evidence", fmt(log_evidence_)},
           {"oracle_gap", fmt(oracle_gap_)},
           {"oracle_mean_dev", fmt(oracle_dev_)}};
    if (cfg_.wall_clock) out.emplace_back("wall_ms", fmt(now_ms() - t0_));
  }

  void write_summary() {
    std::ofstream f(out_ / "summary.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write summary.csv in " + out_.string());
    for (std::size_t i = 0; i < result_.summary.size(); ++i) f << (i ? "," : "") << result_.summary[i].first;
    f << "\n";
    for (std::size_t i = 0; i < result_.summary.size(); ++i) f << (i ? "," : "") << result_.summary[i].second;
    f << "\n";
    if (!f) throw IoError("failed writing summary.csv");
  }

  void emit(const json& row) {
    metrics_->write(row);
    result_.metrics.push_back(row);
    if (on_row_) on_row_(row);
  }

  Checkpoint base_checkpoint() const {
    Checkpoint c;
    c.info = {{"mode", mode_name(cfg_.mode)}, {"config", core_config(cfg_)},
              {"metrics_rows", metrics_->rows()}};
    c.lambda = driver_.lambda;
    c.schedule = driver_.schedule.state_json();
    return c;
  }

  Checkpoint final_checkpoint() const {
    Checkpoint c = base_checkpoint();
    c.info["final"] = true;
    c.info["layout"] = family_->layout().to_json();
    c.info["family"] = family_->config().to_json();
    return c;
  }

  std::size_t load_resume() {
    Checkpoint c = read_checkpoint(cfg_.resume);
    if (c.info.value("final", false)) throw ConfigError("cannot resume from a final checkpoint");
    if (c.info.value("config", json()) != core_config(cfg_)) {
      throw ConfigError("checkpoint was written by a different configuration");
    }
    driver_.lambda = c.lambda;
    driver_.schedule.restore(c.schedule);
    if (c.info.contains("epoch")) {
      start_epoch_ = c.info.at("epoch").get<int>();
      steps_done_ = start_epoch_;
    }
    if (c.info.contains("best")) {
      const json& b = c.info.at("best");
      best_epoch_ = b.at("epoch").get<int>();
      best_elbo_ = b.at("elbo").get<double>();
      const auto v = b.at("lambda").get<std::vector<double>>();
      best_lambda_ = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    if (c.info.contains("t")) steps_done_ = c.info.at("t").get<int>() + 1;
    const auto rows = c.info.at("metrics_rows").get<std::size_t>();
    resume_ = std::move(c);
    return rows;
  }

  const ConjugateFamily& conjugate() const {
    if (family_->scheme() != Scheme::kConjugate) throw ConfigError("this mode needs the conjugate scheme");
    return static_cast<const ConjugateFamily&>(*family_);
  }
  const LgssmParams& lgssm() const {
    if (model_->kind() != ModelKind::kLgssm) throw ConfigError("this mode needs an LGSSM model");
    return static_cast<const LgssmModel&>(*model_).params();
  }

  const ExperimentConfig& cfg_;
  std::function<void(const json&)> on_row_;
  std::unique_ptr<SsmModel> model_;
  std::unique_ptr<VariationalFamily> family_;
  Trajectory traj_;
  int T_ = 0;
  DriverState driver_;
  fs::path out_;
  std::unique_ptr<MetricsWriter> metrics_;
  RunResult result_;
  std::optional<Checkpoint> resume_;
  std::optional<GradientEstimate> prev_;
  int start_epoch_ = 0;
  int steps_done_ = 0;
  int best_epoch_ = 0;
  double best_elbo_ = -std::numeric_limits<double>::infinity();
  Vec best_lambda_;
  double t0_ = 0.0;
  double log_evidence_ = std::numeric_limits<double>::quiet_NaN();
  double oracle_gap_ = std::numeric_limits<double>::quiet_NaN();
  double oracle_dev_ = std::numeric_limits<double>::quiet_NaN();
};

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kOffline: return "offline";
    case Mode::kRecursiveEpoch: return "recursive-epoch";
    case Mode::kOnline: return "online";
    case Mode::kOracle: return "oracle";
    case Mode::kBackwardMc: return "backward-mc";
  }
  return "offline";
}

Mode mode_from_name(const std::string& name) {
  if (name == "offline") return Mode::kOffline;
  if (name == "recursive-epoch") return Mode::kRecursiveEpoch;
  if (name == "online") return Mode::kOnline;
  if (name == "oracle") return Mode::kOracle;
  if (name == "backward-mc") return Mode::kBackwardMc;
  throw ConfigError("unknown mode: " + name);
}

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  check(model.is_object() && model.contains("kind"), "model spec needs a 'kind'");
  check(T >= 1, "T must be at least 1");
  check(N >= 1, "N must be at least 1");
  check(M >= 0, "M must be non-negative (0 selects full sums)");
  check(epochs >= 0, "epochs must be non-negative");
  check(inner_steps >= 1, "inner_steps must be at least 1");
  check(eval_every >= 0 && eval_sequences >= 0 && eval_T >= 0 && eval_N >= 0, "evaluation counts must be non-negative");
  check(!keep_best || eval_every > 0, "keep_best needs eval_every > 0");
  check(smoothing_paths >= 1, "smoothing_paths must be at least 1");
  check(ckpt_every >= 0, "ckpt_every must be non-negative");
  check(estimator.workers >= 1 && estimator.block_rows >= 1, "workers and block_rows must be positive");
  check(family.truncation >= 1, "truncation must be at least 1");
  if (family.scheme == Scheme::kNonAmortized) {
    check(mode == Mode::kOnline, "the non-amortized scheme trains in online mode only");
  }
  if (mode == Mode::kBackwardMc || mode == Mode::kOracle) {
    check(family.scheme == Scheme::kConjugate, mode_name(mode) + " mode needs the conjugate scheme");
  }
  if (mode == Mode::kOracle) {
    check(model.value("kind", std::string()) == "lgssm", "oracle mode needs an LGSSM model");
    check(family.obs_hidden.empty(), "oracle mode needs a linear observation map");
  }
  if (!data_path.empty()) check(fs::exists(data_path), "data file does not exist: " + data_path);
  if (!resume.empty()) check(fs::exists(resume), "checkpoint does not exist: " + resume);
  try {
    schedule.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

json ExperimentConfig::to_json() const {
  return {{"schema", kConfigSchema},
          {"mode", mode_name(mode)},
          {"model", model},
          {"family", family.to_json()},
          {"T", T},
          {"seed", seed},
          {"data_path", data_path},
          {"sampler",
           {{"N", N},
            {"M", M},
            {"control_variate", estimator.control_variate},
            {"analytic_entropy", estimator.analytic_entropy},
            {"kernel_entropy", estimator.kernel_entropy},
            {"workers", estimator.workers},
            {"block_rows", estimator.block_rows},
            {"max_trials_per_draw", estimator.max_trials_per_draw}}},
          {"schedule", schedule.to_json()},
          {"train", {{"epochs", epochs}, {"inner_steps", inner_steps}, {"eval_every", eval_every},
                     {"keep_best", keep_best}}},
          {"eval",
           {{"sequences", eval_sequences}, {"T", eval_T}, {"N", eval_N}, {"smoothing_paths", smoothing_paths}}},
          {"out_dir", out_dir},
          {"ckpt_every", ckpt_every},
          {"resume", resume},
          {"wall_clock", wall_clock}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("schema")) throw ConfigError("config is missing \"schema\"");
  if (get_or<int>(j, "schema", 0) != kConfigSchema) {
    throw ConfigError("unsupported config schema " + j.at("schema").dump() + " (expected 1)");
  }
  ExperimentConfig c;
  c.mode = mode_from_name(get_or<std::string>(j, "mode", "offline"));
  if (j.contains("model")) c.model = j.at("model");
  try {
    if (j.contains("family")) c.family = FamilyConfig::from_json(j.at("family"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("family: ") + e.what());
  }
  c.T = get_or<int>(j, "T", c.T);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.data_path = get_or<std::string>(j, "data_path", c.data_path);
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    c.N = get_or<Eigen::Index>(s, "N", c.N);
    c.M = get_or<int>(s, "M", c.M);
    c.estimator.control_variate = get_or<bool>(s, "control_variate", c.estimator.control_variate);
    c.estimator.analytic_entropy = get_or<bool>(s, "analytic_entropy", c.estimator.analytic_entropy);
    c.estimator.kernel_entropy = get_or<bool>(s, "kernel_entropy", c.estimator.kernel_entropy);
    c.estimator.workers = get_or<int>(s, "workers", c.estimator.workers);
    c.estimator.block_rows = get_or<Eigen::Index>(s, "block_rows", c.estimator.block_rows);
    c.estimator.max_trials_per_draw = get_or<int>(s, "max_trials_per_draw", c.estimator.max_trials_per_draw);
  }
  try {
    if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j.at("schedule"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  if (c.mode == Mode::kOnline && !(j.contains("schedule") && j.at("schedule").contains("kind"))) {
    c.schedule.kind = ScheduleKind::kInverseSqrt;
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    c.epochs = get_or<int>(t, "epochs", c.epochs);
    c.inner_steps = get_or<int>(t, "inner_steps", c.inner_steps);
    c.eval_every = get_or<int>(t, "eval_every", c.eval_every);
    c.keep_best = get_or<bool>(t, "keep_best", c.keep_best);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    c.eval_sequences = get_or<int>(e, "sequences", c.eval_sequences);
    c.eval_T = get_or<int>(e, "T", c.eval_T);
    c.eval_N = get_or<Eigen::Index>(e, "N", c.eval_N);
    c.smoothing_paths = get_or<int>(e, "smoothing_paths", c.smoothing_paths);
  }
  c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);
  c.ckpt_every = get_or<int>(j, "ckpt_every", c.ckpt_every);
  c.resume = get_or<std::string>(j, "resume", c.resume);
  c.wall_clock = get_or<bool>(j, "wall_clock", c.wall_clock);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::unique_ptr<SsmModel> build_model(const json& spec, std::uint64_t master_seed) {
  const std::string kind = spec.value("kind", std::string());
  const std::uint64_t seed = spec.contains("seed") ? spec.at("seed").get<std::uint64_t>()
                                                   : derive(master_seed, kModelSalt);
  try {
    if (kind == "lgssm" && !spec.contains("A")) {
      return std::make_unique<LgssmModel>(
          random_lgssm(spec.value("dim_x", 2), spec.value("dim_y", spec.value("dim_x", 2)), seed));
    }
    if (kind == "chaotic_rnn" && !spec.contains("W")) {
      ChaoticRnnParams p = random_chaotic_rnn(spec.value("dim", spec.value("dim_x", 5)), seed);
      p.step = spec.value("step", p.step);
      p.tau = spec.value("tau", p.tau);
      p.gain = spec.value("gain", p.gain);
      p.student_dof = spec.value("student_dof", p.student_dof);
      p.student_scale = spec.value("student_scale", p.student_scale);
      if (spec.contains("q")) p.Q = spec.at("q").get<double>() * Mat::Identity(p.W.rows(), p.W.rows());
      return std::make_unique<ChaoticRnnModel>(std::move(p));
    }
    return model_from_json(spec);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

Trajectory experiment_data(const ExperimentConfig& config, const SsmModel& model) {
  if (!config.data_path.empty()) {
    return read_trajectory_csv(config.data_path, model.state_dim(), model.obs_dim());
  }
  return simulate(model, config.T, derive(config.seed, kDataSalt));
}

void generate_data(const ExperimentConfig& config) {
  const auto model = build_model(config.model, config.seed);
  fs::create_directories(config.out_dir);
  const Trajectory traj = simulate(*model, config.T, derive(config.seed, kDataSalt));
  write_trajectory_csv(traj, (fs::path(config.out_dir) / "trajectory.csv").string());
  std::ofstream m(fs::path(config.out_dir) / "model.json");
  if (!m) throw IoError("cannot write model.json in " + config.out_dir);
  m << model->to_json().dump(2) << "\n";
}

double metric_smoothing_rmse(const RowMat& states, const RowMat& means) {
  require(states.rows() == means.rows() && states.cols() == means.cols(),
          "metric: states and means have different shapes");
  require(states.rows() >= 1, "metric: empty sequence");
  double s = 0.0;
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    s += std::sqrt((states.row(t) - means.row(t)).squaredNorm() / static_cast<double>(states.cols()));
  }
  return s / static_cast<double>(states.rows());
}

std::pair<double, double> metric_onestep(const RowMat& states, const RowMat& one_step,
                                         const RowMat& filt) {
  require(one_step.rows() + 1 == states.rows(), "metric: one-step means must have T rows");
  const double k2 = metric_smoothing_rmse(states, filt);
  if (one_step.rows() == 0) return {std::numeric_limits<double>::quiet_NaN(), k2};
  return {metric_smoothing_rmse(states.topRows(one_step.rows()), one_step), k2};
}

FrozenEvaluation evaluate_frozen(const VariationalFamily& family, const Vec& lambda,
                                 const SsmModel& model, const RowMat& ys, Eigen::Index N, int M,
                                 std::uint64_t seed, const EstimatorOptions& opts,
                                 int smoothing_paths) {
  FrozenEvaluation ev;
  const auto n = ys.rows();
  OnlineEstimator est(family, model, {N, M, seed}, opts);
  ev.one_step.resize(n - 1, family.dim());
  ev.min_ess = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t < n; ++t) {
    const GradientEstimate g = est.step(lambda, ys.row(t).transpose());
    ev.elbo = g.elbo;
    if (t >= 1) {
      ev.one_step.row(t - 1) = est.cloud()->one_step_mean.transpose();
      ev.min_ess = std::min(ev.min_ess, g.ess_min);
    }
  }
  const FilterPass pass = run_filter(family, lambda, ys);
  ev.filtering = filtering_means(pass);
  ev.smoothing = smoothing_means(pass, smoothing_paths, mix_seed(seed, kPathsSalt));
  return ev;
}

RunResult run_experiment(const ExperimentConfig& config,
                         const std::function<void(const json&)>& on_row) {
  config.validate();
  Runner r(config, on_row);
  return r.run();
}

std::vector<BenchRow> bench_steps(const ExperimentConfig& config, const std::vector<Eigen::Index>& ns,
                                  int reps) {
  const auto model = build_model(config.model, config.seed);
  FamilyConfig fc = config.family;
  fc.dim_x = model->state_dim();
  fc.dim_y = model->obs_dim();
  const auto family = make_family(fc);
  const Trajectory traj = experiment_data(config, *model);
  Stream init(config.seed, Purpose::kInit);
  const int T = static_cast<int>(traj.length()) - 1;
  Vec lambda = family->initial_parameters(init, T);
  const int steps = std::max(1, std::min(reps, T));
  std::vector<BenchRow> out;

  auto time_steps = [&](Eigen::Index N, int M) {
    OnlineEstimator est(*family, *model, {N, M, derive(config.seed, kOnlineSalt)}, config.estimator);
    est.step(lambda, traj.y(0));
    const double t0 = now_ms();
    for (int t = 1; t <= steps; ++t) est.step(lambda, traj.y(t));
    return (now_ms() - t0) / steps;
  };
  for (Eigen::Index N : ns) {
    out.push_back({"full", N, 0, time_steps(N, 0)});
    out.push_back({"backward_sampled", N, std::max(config.M, 1), time_steps(N, std::max(config.M, 1))});
  }
  if (closed_form_available(*family, *model)) {
    const auto& fam = static_cast<const ConjugateFamily&>(*family);
    const auto& p = static_cast<const LgssmModel&>(*model).params();
    const double t0 = now_ms();
    for (int r = 0; r < std::max(1, reps / 10); ++r) closed_form_elbo_and_grad(fam, lambda, p, traj.observations);
    const double per_epoch = (now_ms() - t0) / std::max(1, reps / 10);
    out.push_back({"closed_form", 0, 0, per_epoch / (T + 1)});
  }
  return out;
}

}  // namespace seqvar
