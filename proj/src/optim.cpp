#include "seqvar/optim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace seqvar {
namespace {

using nlohmann::json;

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
Vec vec_from(const json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
}

json rowmat_json(const RowMat& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}
RowMat rowmat_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require(static_cast<Eigen::Index>(data.size()) == rows * cols, "checkpoint: bad array length");
  return Eigen::Map<const RowMat>(data.data(), rows, cols);
}

json block_json(const ParamBlock& b) { return {{"offset", b.offset}, {"size", b.size}}; }
ParamBlock block_from(const json& j) {
  return {j.at("offset").get<Eigen::Index>(), j.at("size").get<Eigen::Index>()};
}

void check_finite(const GradientEstimate& g, const char* where) {
  if (!g.grad.allFinite()) {
    throw NumericError(std::string(where) + ": non-finite gradient " + g.diagnostics().dump());
  }
}

const Vec& apply(DriverState& s, const Vec& direction) {
  const Vec clipped = clip_global_norm(direction, s.schedule.config().clip_norm);
  s.lambda += s.schedule.increment(clipped);
  if (!s.lambda.allFinite()) throw NumericError("parameters became non-finite");
  return s.lambda;
}

Vec difference(DriverState& s, const GradientEstimate& grad_t, const GradientEstimate* grad_tm1) {
  check_finite(grad_t, "update");
  Vec dir = expand_gradient(grad_t, s.lambda.size());
  if (grad_tm1 != nullptr) {
    check_finite(*grad_tm1, "update");
    dir -= expand_gradient(*grad_tm1, s.lambda.size());
  }
  return dir;
}

}  // namespace

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kInverseSqrt: return "inverse_sqrt";
    case ScheduleKind::kAdam: return "adam";
  }
  return "constant";
}

ScheduleKind schedule_from_name(const std::string& name) {
  if (name == "constant") return ScheduleKind::kConstant;
  if (name == "inverse_sqrt") return ScheduleKind::kInverseSqrt;
  if (name == "adam") return ScheduleKind::kAdam;
  throw ParameterError("unknown schedule: " + name);
}

void ScheduleConfig::validate() const {
  require(base_rate >= 0.0 && std::isfinite(base_rate), "schedule: base_rate must be finite and >= 0");
  require(decay_steps > 0.0, "schedule: decay_steps must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "schedule: betas must be in [0, 1)");
  require(epsilon > 0.0, "schedule: epsilon must be positive");
}

json ScheduleConfig::to_json() const {
  return {{"kind", schedule_name(kind)}, {"base_rate", base_rate}, {"decay_steps", decay_steps},
          {"beta1", beta1}, {"beta2", beta2}, {"epsilon", epsilon}, {"clip_norm", clip_norm}};
}

ScheduleConfig ScheduleConfig::from_json(const json& j) {
  ScheduleConfig c;
  c.kind = schedule_from_name(j.value("kind", std::string("constant")));
  c.base_rate = j.value("base_rate", c.base_rate);
  c.decay_steps = j.value("decay_steps", c.decay_steps);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.validate();
  return c;
}

Vec clip_global_norm(const Vec& g, double max_norm) {
  if (max_norm <= 0.0) return g;
  const double n = g.norm();
  if (n <= max_norm) return g;
  return g * (max_norm / n);
}

StepSchedule::StepSchedule(ScheduleConfig config) : config_(config) { config_.validate(); }

double StepSchedule::rate() const {
  if (config_.kind == ScheduleKind::kInverseSqrt) {
    return config_.base_rate / std::sqrt(1.0 + static_cast<double>(steps_) / config_.decay_steps);
  }
  return config_.base_rate;
}

Vec StepSchedule::increment(const Vec& direction) {
  const double r = rate();
  ++steps_;
  if (config_.kind != ScheduleKind::kAdam) return r * direction;
  // Moment vectors grow with lambda (non-amortized slots); new coordinates start at zero.
  const Eigen::Index n = direction.size();
  if (m_.size() < n) {
    const Eigen::Index old = m_.size();
    m_.conservativeResize(n);
    v_.conservativeResize(n);
    m_.tail(n - old).setZero();
    v_.tail(n - old).setZero();
  }
  m_.head(n) = config_.beta1 * m_.head(n) + (1.0 - config_.beta1) * direction;
  v_.head(n) = config_.beta2 * v_.head(n) + (1.0 - config_.beta2) * direction.cwiseAbs2();
  const double k = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, k);
  const double c2 = 1.0 - std::pow(config_.beta2, k);
  return (r * (m_.head(n) / c1).array() / ((v_.head(n) / c2).array().sqrt() + config_.epsilon)).matrix();
}

json StepSchedule::state_json() const {
  return {{"config", config_.to_json()}, {"steps", steps_}, {"m", vec_json(m_)}, {"v", vec_json(v_)}};
}

void StepSchedule::restore(const json& state) {
  config_ = ScheduleConfig::from_json(state.at("config"));
  steps_ = state.at("steps").get<long>();
  m_ = vec_from(state.at("m"));
  v_ = vec_from(state.at("v"));
}

Vec expand_gradient(const GradientEstimate& g, Eigen::Index size) {
  require(g.block.offset >= 0 && g.block.size == g.grad.size() && g.block.offset + g.block.size <= size,
          "gradient block does not fit the parameter vector");
  Vec out = Vec::Zero(size);
  out.segment(g.block.offset, g.block.size) = g.grad;
  return out;
}

const Vec& offline_epoch(DriverState& s, const GradientEstimate& grad) {
  check_finite(grad, "offline_epoch");
  return apply(s, expand_gradient(grad, s.lambda.size()));
}

const Vec& recursive_epoch_step(DriverState& s, const GradientEstimate& grad_t,
                                const GradientEstimate* grad_tm1) {
  return apply(s, difference(s, grad_t, grad_tm1));
}

const Vec& online_step(DriverState& s, const GradientEstimate& grad_t,
                       const GradientEstimate* grad_tm1) {
  return apply(s, difference(s, grad_t, grad_tm1));
}

// ---------------------------------------------------------------- checkpoints

json cloud_to_json(const ParticleCloud& c) {
  return {{"t", c.t},
          {"xi", rowmat_json(c.xi)},
          {"H", vec_json(c.H)},
          {"G", rowmat_json(c.G)},
          {"logq", vec_json(c.logq)},
          {"q_flat", vec_json(c.q.flat())},
          {"q_jacobian", matrix_to_json(c.q_jacobian)},
          {"block", block_json(c.block)},
          {"ess_min", num(c.ess_min)},
          {"acc_rate", num(c.acc_rate)},
          {"one_step_mean", vec_json(c.one_step_mean)}};
}

ParticleCloud cloud_from_json(const json& j) {
  ParticleCloud c;
  c.t = j.at("t").get<int>();
  c.xi = rowmat_from(j.at("xi"));
  c.H = vec_from(j.at("H"));
  c.G = rowmat_from(j.at("G"));
  c.logq = vec_from(j.at("logq"));
  c.q = NaturalGaussian::from_flat(c.xi.cols(), vec_from(j.at("q_flat")));
  c.q_jacobian = matrix_from_json(j.at("q_jacobian"));
  c.block = block_from(j.at("block"));
  c.ess_min = num_from(j.at("ess_min"));
  c.acc_rate = num_from(j.at("acc_rate"));
  c.one_step_mean = vec_from(j.at("one_step_mean"));
  return c;
}

json family_state_to_json(const FamilyState& s) {
  json window = json::array();
  for (const auto& term : s.window) {
    window.push_back({{"direct", matrix_to_json(term.direct)},
                      {"transition", matrix_to_json(term.transition)}});
  }
  return {{"t", s.t}, {"carrier", vec_json(s.carrier)}, {"window", window}};
}

FamilyState family_state_from_json(const json& j) {
  FamilyState s;
  s.t = j.at("t").get<int>();
  s.carrier = vec_from(j.at("carrier"));
  for (const auto& term : j.at("window")) {
    s.window.push_back({matrix_from_json(term.at("direct")), matrix_from_json(term.at("transition"))});
  }
  return s;
}

json checkpoint_to_json(const Checkpoint& c) {
  json j = {{"format", "seqvar-checkpoint"}, {"version", 1}, {"info", c.info},
            {"lambda", vec_json(c.lambda)}, {"schedule", c.schedule}};
  if (c.grad_prev) {
    j["grad_prev"] = {{"grad", vec_json(c.grad_prev->grad)},
                      {"block", block_json(c.grad_prev->block)},
                      {"elbo", num(c.grad_prev->elbo)},
                      {"t", c.grad_prev->t}};
  }
  if (c.stream_t) j["stream_t"] = *c.stream_t;
  if (c.cloud) j["cloud"] = cloud_to_json(*c.cloud);
  if (c.family_state) j["family_state"] = family_state_to_json(*c.family_state);
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  require(j.value("format", std::string()) == "seqvar-checkpoint", "not a seqvar checkpoint");
  require(j.value("version", 0) == 1, "unsupported checkpoint version");
  Checkpoint c;
  c.info = j.at("info");
  c.lambda = vec_from(j.at("lambda"));
  c.schedule = j.at("schedule");
  if (j.contains("grad_prev")) {
    const json& g = j.at("grad_prev");
    GradientEstimate est;
    est.grad = vec_from(g.at("grad"));
    est.block = block_from(g.at("block"));
    est.elbo = num_from(g.at("elbo"));
    est.t = g.at("t").get<int>();
    c.grad_prev = std::move(est);
  }
  if (j.contains("stream_t")) c.stream_t = j.at("stream_t").get<int>();
  if (j.contains("cloud")) c.cloud = cloud_from_json(j.at("cloud"));
  if (j.contains("family_state")) c.family_state = family_state_from_json(j.at("family_state"));
  return c;
}

void write_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << checkpoint_to_json(c).dump() << "\n";
    if (!out) throw IoError("failed writing " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint to " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError("corrupt checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace seqvar
