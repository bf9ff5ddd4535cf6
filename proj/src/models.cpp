#include "seqvar/models.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace seqvar {
namespace {

void require_square(const Mat& m, Eigen::Index d, const char* name) {
  if (m.rows() != d || m.cols() != d) {
    throw ParameterError(std::string(name) + " must be " + std::to_string(d) + "x" +
                         std::to_string(d));
  }
}

void require_pd(const Mat& m, const char* name) {
  if ((m - m.transpose()).norm() > 1e-10 * (1.0 + m.norm())) {
    throw ParameterError(std::string(name) + " must be symmetric");
  }
  Eigen::LLT<Mat> llt(symmetrize(m));
  if (llt.info() != Eigen::Success) {
    throw ParameterError(std::string(name) + " must be positive definite");
  }
}

// Positive semi-definite with a tolerance relative to the largest eigenvalue.
void require_psd(const Mat& m, const char* name) {
  if ((m - m.transpose()).norm() > 1e-10 * (1.0 + m.norm())) {
    throw ParameterError(std::string(name) + " must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m));
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-12 * scale) {
    throw ParameterError(std::string(name) + " must be positive semi-definite");
  }
}

}  // namespace

// ---------------------------------------------------------------- parameters

void LgssmParams::validate() const {
  const Eigen::Index dx = A.rows();
  require(dx > 0, "LGSSM: state dimension must be positive");
  require_square(A, dx, "A");
  require_dim(mu0.size(), dx, "mu0");
  require_square(Q0, dx, "Q0");
  require_square(Q, dx, "Q");
  require(B.cols() == dx && B.rows() > 0, "B must be d_y x d_x");
  require_square(R, B.rows(), "R");
  require_pd(Q0, "Q0");
  require_pd(Q, "Q");
  require_pd(R, "R");
}

void ChaoticRnnParams::validate() const {
  const Eigen::Index d = W.rows();
  require(d > 0, "chaotic RNN: dimension must be positive");
  require_square(W, d, "W");
  require_square(Q, d, "Q");
  require(step > 0.0, "chaotic RNN: step must be positive");
  require(tau > 0.0, "chaotic RNN: tau must be positive");
  require(student_dof > 0.0, "chaotic RNN: Student-t dof must be positive");
  require(student_scale > 0.0, "chaotic RNN: Student-t scale must be positive");
  require_pd(Q, "Q");
}

// ---------------------------------------------------------------- noise

GaussianNoise::GaussianNoise(const Mat& cov) : cov_(symmetrize(cov)) {
  require(cov_.rows() == cov_.cols(), "noise covariance must be square");
  Eigen::LLT<Mat> llt(cov_);
  if (llt.info() == Eigen::Success) {
    factor_ = llt.matrixL();
    density_.emplace(cov_);
  } else {
    require_psd(cov_, "noise covariance");
    factor_ = psd_sqrt(cov_);
  }
}

const Covariance& GaussianNoise::density() const {
  if (!density_) throw ParameterError("density of a singular noise covariance is undefined");
  return *density_;
}

Vec GaussianNoise::sample(Stream& rng) const { return factor_ * rng.normal_vector(cov_.rows()); }

// ---------------------------------------------------------------- base model

double SsmModel::log_transition(const Vec& x_prev, const Vec& x) const {
  require_dim(x_prev.size(), state_dim(), "log_transition");
  require_dim(x.size(), state_dim(), "log_transition");
  return transition_noise_.density().log_density(x - transition_mean(x_prev));
}

Vec SsmModel::sample_transition(const Vec& x_prev, Stream& rng) const {
  return transition_mean(x_prev) + transition_noise_.sample(rng);
}

double SsmModel::log_ell(int t, const Vec* x_prev, const Vec& x, const Vec& y) const {
  require_dim(x.size(), state_dim(), "log_ell: x");
  require_dim(y.size(), obs_dim(), "log_ell: y");
  if (t == 0) {
    require(x_prev == nullptr, "log_ell: t = 0 takes no previous state");
    return log_initial(x) + log_emission(x, y);
  }
  require(x_prev != nullptr, "log_ell: t >= 1 needs the previous state");
  return log_transition(*x_prev, x) + log_emission(x, y);
}

RowMat SsmModel::transition_mean_rows(const RowMat& x_prev) const {
  RowMat out(x_prev.rows(), state_dim());
  for (Eigen::Index j = 0; j < x_prev.rows(); ++j) {
    out.row(j) = transition_mean(x_prev.row(j).transpose()).transpose();
  }
  return out;
}

Vec SsmModel::log_emission_rows(const RowMat& xs, const Vec& y) const {
  Vec out(xs.rows());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) out[i] = log_emission(xs.row(i).transpose(), y);
  return out;
}

Mat SsmModel::log_transition_matrix(const RowMat& x_prev, const RowMat& x) const {
  require_dim(x_prev.cols(), state_dim(), "log_transition_matrix");
  require_dim(x.cols(), state_dim(), "log_transition_matrix");
  return log_transition_matrix(whiten_transition_means(x_prev), whiten_states(x));
}

SsmModel::WhitenedMeans SsmModel::whiten_transition_means(const RowMat& x_prev) const {
  require_dim(x_prev.cols(), state_dim(), "whiten_transition_means");
  const Covariance& noise = transition_noise_.density();
  WhitenedMeans out;
  out.w = noise.lower().triangularView<Eigen::Lower>().solve(
      transition_mean_rows(x_prev).transpose());
  out.sq = out.w.colwise().squaredNorm().transpose();
  out.log_norm = -0.5 * (noise.log_det() + static_cast<double>(state_dim()) * log_two_pi());
  return out;
}

Mat SsmModel::whiten_states(const RowMat& x) const {
  require_dim(x.cols(), state_dim(), "whiten_states");
  return transition_noise_.density().lower().triangularView<Eigen::Lower>().solve(x.transpose());
}

Mat SsmModel::log_transition_matrix(const WhitenedMeans& prev, const Mat& wx) const {
  const Vec nx = wx.colwise().squaredNorm().transpose();
  Mat quad = -2.0 * (wx.transpose() * prev.w);
  quad.colwise() += nx;
  quad.rowwise() += prev.sq.transpose();
  return (-0.5 * quad).array() + prev.log_norm;
}

// ---------------------------------------------------------------- LGSSM

LgssmModel::LgssmModel(LgssmParams params) : params_(std::move(params)) {
  const Eigen::Index dx = params_.A.rows();
  require(dx > 0, "LGSSM: state dimension must be positive");
  require_square(params_.A, dx, "A");
  require_dim(params_.mu0.size(), dx, "mu0");
  require_square(params_.Q0, dx, "Q0");
  require_square(params_.Q, dx, "Q");
  require(params_.B.cols() == dx, "B must be d_y x d_x");
  require_square(params_.R, params_.B.rows(), "R");
  initial_ = GaussianNoise(params_.Q0);
  transition_noise_ = GaussianNoise(params_.Q);
  emission_ = GaussianNoise(params_.R);
}

double LgssmModel::log_initial(const Vec& x) const {
  require_dim(x.size(), state_dim(), "log_initial");
  return initial_.density().log_density(x - params_.mu0);
}

Vec LgssmModel::transition_mean(const Vec& x_prev) const { return params_.A * x_prev; }

double LgssmModel::log_emission(const Vec& x, const Vec& y) const {
  require_dim(x.size(), state_dim(), "log_emission: x");
  require_dim(y.size(), obs_dim(), "log_emission: y");
  return emission_.density().log_density(y - params_.B * x);
}

Vec LgssmModel::sample_initial(Stream& rng) const { return params_.mu0 + initial_.sample(rng); }

Vec LgssmModel::sample_emission(const Vec& x, Stream& rng) const {
  return params_.B * x + emission_.sample(rng);
}

RowMat LgssmModel::transition_mean_rows(const RowMat& x_prev) const {
  return x_prev * params_.A.transpose();
}

Vec LgssmModel::log_emission_rows(const RowMat& xs, const Vec& y) const {
  require_dim(y.size(), obs_dim(), "log_emission_rows");
  const Covariance& r = emission_.density();
  RowMat resid = -(xs * params_.B.transpose());
  resid.rowwise() += y.transpose();
  const Vec quad = r.mahalanobis_rows(resid);
  const double c = -0.5 * (r.log_det() + static_cast<double>(obs_dim()) * log_two_pi());
  return (-0.5 * quad).array() + c;
}

nlohmann::json LgssmModel::to_json() const {
  return {{"kind", "lgssm"},
          {"mu0", vector_to_json(params_.mu0)},
          {"Q0", matrix_to_json(params_.Q0)},
          {"A", matrix_to_json(params_.A)},
          {"B", matrix_to_json(params_.B)},
          {"Q", matrix_to_json(params_.Q)},
          {"R", matrix_to_json(params_.R)}};
}

// ---------------------------------------------------------------- chaotic RNN

double student_t_log_pdf(double z, double dof, double scale) {
  const double u = z / scale;
  return std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
         0.5 * std::log(dof * std::numbers::pi) - std::log(scale) -
         0.5 * (dof + 1.0) * std::log1p(u * u / dof);
}

ChaoticRnnModel::ChaoticRnnModel(ChaoticRnnParams params) : params_(std::move(params)) {
  const Eigen::Index d = params_.W.rows();
  require(d > 0, "chaotic RNN: dimension must be positive");
  require_square(params_.W, d, "W");
  require_square(params_.Q, d, "Q");
  require(params_.step > 0.0 && params_.tau > 0.0, "chaotic RNN: step and tau must be positive");
  require(params_.student_dof > 0.0 && params_.student_scale > 0.0,
          "chaotic RNN: Student-t parameters must be positive");
  transition_noise_ = GaussianNoise(params_.Q);
  student_log_norm_ = student_t_log_pdf(0.0, params_.student_dof, params_.student_scale);
}

double ChaoticRnnModel::log_initial(const Vec& x) const {
  require_dim(x.size(), state_dim(), "log_initial");
  return transition_noise_.density().log_density(x);
}

Vec ChaoticRnnModel::transition_mean(const Vec& x_prev) const {
  require_dim(x_prev.size(), state_dim(), "transition_mean");
  const double rate = params_.step / params_.tau;
  const Vec drive = params_.gain * (params_.W * x_prev.array().tanh().matrix());
  return x_prev + rate * (drive - x_prev);
}

double ChaoticRnnModel::log_emission(const Vec& x, const Vec& y) const {
  require_dim(x.size(), state_dim(), "log_emission: x");
  require_dim(y.size(), obs_dim(), "log_emission: y");
  const double dof = params_.student_dof;
  const double s = params_.student_scale;
  double out = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double u = (y[k] - x[k]) / s;
    out += student_log_norm_ - 0.5 * (dof + 1.0) * std::log1p(u * u / dof);
  }
  return out;
}

Vec ChaoticRnnModel::sample_initial(Stream& rng) const { return transition_noise_.sample(rng); }

Vec ChaoticRnnModel::sample_emission(const Vec& x, Stream& rng) const {
  Vec y = x;
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    y[k] += params_.student_scale * rng.student_t(params_.student_dof);
  }
  return y;
}

RowMat ChaoticRnnModel::transition_mean_rows(const RowMat& x_prev) const {
  const double rate = params_.step / params_.tau;
  const RowMat th = x_prev.array().tanh();
  RowMat out = (1.0 - rate) * x_prev;
  out.noalias() += (rate * params_.gain) * (th * params_.W.transpose());
  return out;
}

Vec ChaoticRnnModel::log_emission_rows(const RowMat& xs, const Vec& y) const {
  require_dim(y.size(), obs_dim(), "log_emission_rows");
  const double dof = params_.student_dof;
  const double s = params_.student_scale;
  RowMat u = (-xs).rowwise() + y.transpose();
  u /= s;
  const Mat terms = ((u.array().square() / dof).log1p() * (-0.5 * (dof + 1.0))).matrix();
  return terms.rowwise().sum().array() + student_log_norm_ * static_cast<double>(xs.cols());
}

nlohmann::json ChaoticRnnModel::to_json() const {
  return {{"kind", "chaotic_rnn"},
          {"W", matrix_to_json(params_.W)},
          {"step", params_.step},
          {"tau", params_.tau},
          {"gain", params_.gain},
          {"Q", matrix_to_json(params_.Q)},
          {"student_dof", params_.student_dof},
          {"student_scale", params_.student_scale}};
}

// ---------------------------------------------------------------- simulation

Trajectory simulate(const SsmModel& model, int T, std::uint64_t seed) {
  require(T >= 0, "simulate: T must be non-negative");
  Trajectory traj;
  traj.seed = seed;
  traj.states.resize(T + 1, model.state_dim());
  traj.observations.resize(T + 1, model.obs_dim());
  Vec x;
  for (int t = 0; t <= T; ++t) {
    Stream state_rng(seed, Purpose::kSimulateState, static_cast<std::uint64_t>(t));
    Stream obs_rng(seed, Purpose::kSimulateObs, static_cast<std::uint64_t>(t));
    x = t == 0 ? model.sample_initial(state_rng) : model.sample_transition(x, state_rng);
    traj.states.row(t) = x.transpose();
    traj.observations.row(t) = model.sample_emission(x, obs_rng).transpose();
  }
  return traj;
}

LgssmParams random_lgssm(Eigen::Index dim_x, Eigen::Index dim_y, std::uint64_t seed) {
  require(dim_x > 0 && dim_y > 0, "random_lgssm: dimensions must be positive");
  Stream rng(seed, Purpose::kModelParams);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
  };
  LgssmParams p;
  p.mu0 = Vec::Zero(dim_x);
  p.Q0 = Mat::Identity(dim_x, dim_x);
  // Random rotation scaled by per-direction contraction in [0.5, 0.95].
  const Eigen::HouseholderQR<Mat> qr(gaussian(dim_x, dim_x));
  const Mat rot = qr.householderQ();
  Vec contraction(dim_x);
  for (Eigen::Index k = 0; k < dim_x; ++k) contraction[k] = 0.5 + 0.45 * rng.uniform();
  p.A = rot * contraction.asDiagonal();
  p.B = gaussian(dim_y, dim_x) / std::sqrt(static_cast<double>(dim_x));
  Vec q(dim_x);
  for (Eigen::Index k = 0; k < dim_x; ++k) q[k] = 0.05 + 0.15 * rng.uniform();
  Vec r(dim_y);
  for (Eigen::Index k = 0; k < dim_y; ++k) r[k] = 0.05 + 0.15 * rng.uniform();
  p.Q = q.asDiagonal();
  p.R = r.asDiagonal();
  return p;
}

ChaoticRnnParams random_chaotic_rnn(Eigen::Index dim, std::uint64_t seed) {
  require(dim > 0, "random_chaotic_rnn: dimension must be positive");
  Stream rng(seed, Purpose::kModelParams);
  ChaoticRnnParams p;
  p.W.resize(dim, dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) p.W(i, j) = sd * rng.normal();
  p.Q = 0.01 * Mat::Identity(dim, dim);
  return p;
}

// ---------------------------------------------------------------- JSON / CSV

nlohmann::json matrix_to_json(const Mat& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Mat matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require(rows >= 0 && cols >= 0 && static_cast<Eigen::Index>(data.size()) == rows * cols,
          "matrix JSON: data length does not match dims");
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[static_cast<std::size_t>(i * cols + c)];
  return m;
}

nlohmann::json vector_to_json(const Vec& v) {
  return {{"rows", v.size()}, {"data", std::vector<double>(v.data(), v.data() + v.size())}};
}

Vec vector_from_json(const nlohmann::json& j) {
  const auto data = j.at("data").get<std::vector<double>>();
  if (j.contains("rows")) {
    require(j.at("rows").get<std::size_t>() == data.size(), "vector JSON: length mismatch");
  }
  return Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
}

std::unique_ptr<SsmModel> model_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "lgssm") {
    LgssmParams p;
    p.mu0 = vector_from_json(j.at("mu0"));
    p.Q0 = matrix_from_json(j.at("Q0"));
    p.A = matrix_from_json(j.at("A"));
    p.B = matrix_from_json(j.at("B"));
    p.Q = matrix_from_json(j.at("Q"));
    p.R = matrix_from_json(j.at("R"));
    return std::make_unique<LgssmModel>(std::move(p));
  }
  if (kind == "chaotic_rnn") {
    ChaoticRnnParams p;
    p.W = matrix_from_json(j.at("W"));
    p.step = j.value("step", p.step);
    p.tau = j.value("tau", p.tau);
    p.gain = j.value("gain", p.gain);
    p.Q = matrix_from_json(j.at("Q"));
    p.student_dof = j.value("student_dof", p.student_dof);
    p.student_scale = j.value("student_scale", p.student_scale);
    return std::make_unique<ChaoticRnnModel>(std::move(p));
  }
  throw ParameterError("unknown model kind: " + kind);
}

void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "t";
  for (Eigen::Index k = 0; k < traj.states.cols(); ++k) out << ",x_" << k;
  for (Eigen::Index k = 0; k < traj.observations.cols(); ++k) out << ",y_" << k;
  out << "\n" << std::setprecision(17);
  for (Eigen::Index t = 0; t < traj.length(); ++t) {
    out << t;
    for (Eigen::Index k = 0; k < traj.states.cols(); ++k) out << "," << traj.states(t, k);
    for (Eigen::Index k = 0; k < traj.observations.cols(); ++k) out << "," << traj.observations(t, k);
    out << "\n";
  }
}

Trajectory read_trajectory_csv(const std::string& path, Eigen::Index dim_x, Eigen::Index dim_y) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    require(static_cast<Eigen::Index>(row.size()) == 1 + dim_x + dim_y,
            "trajectory CSV: wrong number of columns");
    rows.push_back(std::move(row));
  }
  Trajectory traj;
  const auto n = static_cast<Eigen::Index>(rows.size());
  traj.states.resize(n, dim_x);
  traj.observations.resize(n, dim_y);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (Eigen::Index k = 0; k < dim_x; ++k) traj.states(t, k) = rows[t][1 + k];
    for (Eigen::Index k = 0; k < dim_y; ++k) traj.observations(t, k) = rows[t][1 + dim_x + k];
  }
  return traj;
}

}  // namespace seqvar
