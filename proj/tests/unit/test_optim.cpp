#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "oracles.hpp"
#include "seqvar/optim.hpp"

using namespace seqvar;

namespace {

GradientEstimate grad_of(const Vec& g, Eigen::Index offset = 0) {
  GradientEstimate e;
  e.grad = g;
  e.block = {offset, g.size()};
  return e;
}

DriverState driver(ScheduleKind kind, double rate, Eigen::Index n, double clip = 0.0) {
  ScheduleConfig c;
  c.kind = kind;
  c.base_rate = rate;
  c.clip_norm = clip;
  return {Vec::LinSpaced(n, -1, 1), StepSchedule(c)};
}

}  // namespace

TEST_CASE("zero rate leaves parameters unchanged") {
  DriverState s = driver(ScheduleKind::kConstant, 0.0, 4);
  const Vec before = s.lambda;
  offline_epoch(s, grad_of(Vec::Ones(4)));
  CHECK(s.lambda == before);
}

TEST_CASE("offline update moves by rate times gradient") {
  DriverState s = driver(ScheduleKind::kConstant, 0.1, 3);
  const Vec before = s.lambda;
  const Vec g = Vec::LinSpaced(3, 2, 4);
  offline_epoch(s, grad_of(g));
  CHECK((s.lambda - before - 0.1 * g).norm() < 1e-15);
  CHECK(s.schedule.steps() == 1);
}

TEST_CASE("recursive updates telescope to the last gradient") {
  DriverState s = driver(ScheduleKind::kConstant, 0.05, 3);
  const Vec start = s.lambda;
  Stream r(1, Purpose::kTest);
  std::optional<GradientEstimate> prev;
  GradientEstimate g;
  for (int t = 0; t < 10; ++t) {
    g = grad_of(r.normal_vector(3));
    recursive_epoch_step(s, g, prev ? &*prev : nullptr);
    prev = g;
  }
  CHECK((s.lambda - start - 0.05 * g.grad).norm() < 1e-12);
}

TEST_CASE("online step: first step and unchanged gradients") {
  DriverState s = driver(ScheduleKind::kConstant, 0.2, 2);
  const Vec start = s.lambda;
  const GradientEstimate g = grad_of(Vec::Constant(2, 1.5));
  online_step(s, g, nullptr);
  CHECK((s.lambda - start - 0.2 * g.grad).norm() < 1e-15);
  const Vec after = s.lambda;
  online_step(s, g, &g);
  CHECK(s.lambda == after);
}

TEST_CASE("block gradients land in their coordinates") {
  const GradientEstimate g = grad_of(Vec::Constant(2, 3.0), 4);
  const Vec full = expand_gradient(g, 8);
  CHECK(full.segment(4, 2) == Vec::Constant(2, 3.0));
  CHECK(full.head(4).norm() == 0.0);
  CHECK(full.tail(2).norm() == 0.0);
  CHECK_THROWS_AS(expand_gradient(g, 5), ParameterError);
}

TEST_CASE("non-finite gradients are rejected") {
  DriverState s = driver(ScheduleKind::kConstant, 0.1, 2);
  Vec bad = Vec::Ones(2);
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(offline_epoch(s, grad_of(bad)), NumericError);
  CHECK(s.lambda.allFinite());
}

TEST_CASE("global-norm clipping") {
  const Vec g = Vec::LinSpaced(5, -3, 7);
  const Vec c = clip_global_norm(g, 2.0);
  CHECK(c.norm() == doctest::Approx(2.0));
  CHECK(testing::cosine(c, g) == doctest::Approx(1.0));
  for (Eigen::Index k = 0; k < g.size(); ++k) CHECK(c[k] * g[k] >= 0.0);
  CHECK(clip_global_norm(g, 100.0) == g);
  CHECK(clip_global_norm(g, 0.0) == g);

  DriverState s = driver(ScheduleKind::kConstant, 1.0, 5, 2.0);
  const Vec before = s.lambda;
  offline_epoch(s, grad_of(g));
  CHECK((s.lambda - before).norm() == doctest::Approx(2.0));
}

TEST_CASE("schedules") {
  ScheduleConfig c;
  c.kind = ScheduleKind::kInverseSqrt;
  c.base_rate = 0.4;
  c.decay_steps = 3.0;
  StepSchedule s(c);
  for (int k = 0; k < 7; ++k) {
    CHECK(s.rate() == doctest::Approx(0.4 / std::sqrt(1.0 + k / 3.0)));
    s.increment(Vec::Ones(1));
  }

  ScheduleConfig a;
  a.kind = ScheduleKind::kAdam;
  a.base_rate = 0.01;
  StepSchedule adam(a);
  const Vec g = Vec::LinSpaced(3, -5, 0.5);
  const Vec d = adam.increment(g);
  // bias-corrected first step is rate * sign(g)
  for (int k = 0; k < 3; ++k) CHECK(d[k] == doctest::Approx(0.01 * (g[k] > 0 ? 1 : -1)).epsilon(1e-6));
  // growing parameter vectors keep old moments
  const Vec d2 = adam.increment(Vec::Ones(5));
  CHECK(d2.size() == 5);
  CHECK(std::abs(d2[4]) > 0.0);

  for (const char* name : {"constant", "inverse_sqrt", "adam"}) {
    CHECK(schedule_name(schedule_from_name(name)) == name);
  }
  CHECK_THROWS(schedule_from_name("sgd"));
  ScheduleConfig bad;
  bad.base_rate = -1.0;
  CHECK_THROWS(StepSchedule{bad});
  CHECK(ScheduleConfig::from_json(a.to_json()).to_json() == a.to_json());
}

TEST_CASE("schedule state restores exactly") {
  ScheduleConfig a;
  a.kind = ScheduleKind::kAdam;
  a.base_rate = 0.03;
  StepSchedule s(a);
  Stream r(2, Purpose::kTest);
  for (int k = 0; k < 5; ++k) s.increment(r.normal_vector(4));
  StepSchedule copy;
  copy.restore(nlohmann::json::parse(s.state_json().dump()));
  const Vec g = r.normal_vector(4);
  CHECK(copy.increment(g) == s.increment(g));
}

TEST_CASE("checkpoints round-trip bitwise") {
  Stream r(3, Purpose::kTest);
  Checkpoint c;
  c.info = {{"mode", "online"}, {"t", 7}};
  c.lambda = r.normal_vector(6);
  c.lambda[0] = 1.0 / 3.0;
  c.lambda[1] = 1e-300;
  ScheduleConfig a;
  a.kind = ScheduleKind::kAdam;
  StepSchedule s(a);
  s.increment(r.normal_vector(6));
  c.schedule = s.state_json();
  GradientEstimate g = grad_of(r.normal_vector(6));
  g.elbo = -12.345678901234567;
  g.t = 7;
  c.grad_prev = g;
  c.stream_t = 8;
  ParticleCloud cloud;
  cloud.t = 7;
  cloud.xi = RowMat::Random(4, 2);
  cloud.H = r.normal_vector(4);
  cloud.G = RowMat::Random(4, 6);
  cloud.q = to_natural({r.normal_vector(2), Mat::Identity(2, 2) * 0.37});
  cloud.logq = cloud.q.log_pdf_rows(cloud.xi);
  cloud.q_jacobian = Mat::Random(6, 6);
  cloud.block = {0, 6};
  cloud.ess_min = std::numeric_limits<double>::quiet_NaN();
  cloud.acc_rate = 0.75;
  cloud.one_step_mean = r.normal_vector(2);
  c.cloud = cloud;
  FamilyState fs;
  fs.t = 7;
  fs.carrier = r.normal_vector(6);
  fs.window.push_back({Mat::Random(6, 6), Mat::Random(6, 6)});
  fs.window.push_back({Mat::Random(6, 6), Mat()});
  c.family_state = fs;

  const auto path = std::filesystem::temp_directory_path() / "seqvar_ckpt_test.ckpt";
  write_checkpoint(c, path.string());
  const Checkpoint b = read_checkpoint(path.string());
  std::filesystem::remove(path);

  CHECK(b.lambda == c.lambda);
  CHECK(b.info == c.info);
  CHECK(b.schedule == c.schedule);
  REQUIRE(b.grad_prev);
  CHECK(b.grad_prev->grad == g.grad);
  CHECK(b.grad_prev->elbo == g.elbo);
  CHECK(b.grad_prev->block == g.block);
  CHECK(*b.stream_t == 8);
  REQUIRE(b.cloud);
  CHECK(b.cloud->xi == cloud.xi);
  CHECK(b.cloud->H == cloud.H);
  CHECK(b.cloud->G == cloud.G);
  CHECK(b.cloud->logq == cloud.logq);
  CHECK(b.cloud->q.flat() == cloud.q.flat());
  CHECK(b.cloud->q_jacobian == cloud.q_jacobian);
  CHECK(std::isnan(b.cloud->ess_min));
  CHECK(b.cloud->acc_rate == 0.75);
  REQUIRE(b.family_state);
  CHECK(b.family_state->carrier == fs.carrier);
  CHECK(b.family_state->window.size() == 2);
  CHECK(b.family_state->window[0].transition == fs.window[0].transition);
  CHECK(b.family_state->window[1].transition.size() == 0);

  CHECK_THROWS_AS(read_checkpoint("/nonexistent/x.ckpt"), IoError);
  const auto junk = std::filesystem::temp_directory_path() / "seqvar_junk.ckpt";
  { std::ofstream(junk) << "{not json"; }
  CHECK_THROWS_AS(read_checkpoint(junk.string()), IoError);
  { std::ofstream(junk) << "{\"format\": \"other\"}"; }
  CHECK_THROWS(read_checkpoint(junk.string()));
  std::filesystem::remove(junk);
}
