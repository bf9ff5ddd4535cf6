#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "seqvar/expfam.hpp"

using namespace seqvar;

namespace {

Mat random_spd(Stream& s, Eigen::Index d) {
  Mat a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = s.normal();
  return a * a.transpose() + 0.5 * Mat::Identity(d, d);
}

NaturalGaussian random_gaussian(Stream& s, Eigen::Index d) {
  return to_natural({s.normal_vector(d), random_spd(s, d)});
}

NaturalGaussian scalar(double e1, double e2) { return {Vec::Constant(1, e1), Mat::Constant(1, 1, e2)}; }

// Moments of a 1-D unnormalized log-density by quadrature.
struct Moments {
  double mass, mean, var;
};
Moments quad_moments(const std::function<double(double)>& logf) {
  const double z = testing::trapezoid([&](double x) { return std::exp(logf(x)); }, -20, 20, 40000);
  const double m = testing::trapezoid([&](double x) { return x * std::exp(logf(x)); }, -20, 20, 40000) / z;
  const double v =
      testing::trapezoid([&](double x) { return (x - m) * (x - m) * std::exp(logf(x)); }, -20, 20, 40000) / z;
  return {z, m, v};
}

}  // namespace

TEST_CASE("standard normal in natural coordinates") {
  const auto ng = to_natural({Vec::Zero(3), Mat::Identity(3, 3)});
  CHECK(ng.eta1().norm() == 0.0);
  CHECK((ng.eta2() + 0.5 * Mat::Identity(3, 3)).norm() < 1e-15);
  CHECK(NaturalGaussian::standard(1).log_pdf(Vec::Zero(1)) == doctest::Approx(-0.9189385332).epsilon(1e-10));
}

TEST_CASE("natural and mean coordinates round trip") {
  Stream s(1, Purpose::kTest);
  for (int rep = 0; rep < 10; ++rep) {
    const MeanGaussian mg{s.normal_vector(4), random_spd(s, 4)};
    const MeanGaussian back = to_mean(to_natural(mg));
    CHECK((back.mean - mg.mean).norm() < 1e-10);
    CHECK((back.cov - mg.cov).norm() < 1e-10);
    const NaturalGaussian ng = random_gaussian(s, 3);
    const NaturalGaussian again = to_natural(to_mean(ng));
    CHECK((again.eta1() - ng.eta1()).norm() < 1e-10);
    CHECK((again.eta2() - ng.eta2()).norm() < 1e-10);
  }
}

TEST_CASE("eta1 = 1, eta2 = -1 has mean 0.5 and variance 0.5") {
  const auto ng = scalar(1.0, -1.0);
  const auto q = quad_moments([](double x) { return x - x * x; });
  CHECK(ng.mean()[0] == doctest::Approx(q.mean).epsilon(1e-8));
  CHECK(ng.covariance()(0, 0) == doctest::Approx(q.var).epsilon(1e-8));
  CHECK(q.mean == doctest::Approx(0.5).epsilon(1e-8));
  CHECK(q.var == doctest::Approx(0.5).epsilon(1e-8));
}

TEST_CASE("log_pdf is symmetric about a zero mean and integrates to one") {
  const auto ng = to_natural({Vec::Zero(1), Mat::Constant(1, 1, 0.7)});
  for (double x : {0.1, 0.9, 2.3}) {
    CHECK(ng.log_pdf(Vec::Constant(1, x)) == doctest::Approx(ng.log_pdf(Vec::Constant(1, -x))));
  }
  const double mass = testing::trapezoid([&](double x) { return std::exp(ng.log_pdf(Vec::Constant(1, x))); },
                                         -8, 8, 16000);
  CHECK(std::abs(mass - 1.0) < 1e-3);
  Stream s(2, Purpose::kTest);
  const auto g3 = random_gaussian(s, 3);
  const Vec x = s.normal_vector(3);
  CHECK(g3.log_pdf(x) == doctest::Approx(testing::gaussian_log_pdf(x, g3.mean(), g3.covariance())).epsilon(1e-12));
  RowMat xs(2, 3);
  xs.row(0) = x.transpose();
  xs.row(1) = -x.transpose();
  const Vec rows = g3.log_pdf_rows(xs);
  CHECK(rows[0] == doctest::Approx(g3.log_pdf(x)));
  CHECK(rows[1] == doctest::Approx(g3.log_pdf(-x)));
  CHECK_THROWS_AS(g3.log_pdf(Vec::Zero(2)), ParameterError);
}

TEST_CASE("score matches finite differences of log_pdf in natural coordinates") {
  Stream s(3, Purpose::kTest);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index d = 1 + rep % 3;
    const auto ng = random_gaussian(s, d);
    const Vec x = ng.mean() + s.normal_vector(d);
    const Vec fd = testing::central_diff(
        [&](const Vec& flat) { return NaturalGaussian::from_flat(d, flat).log_pdf(x); }, ng.flat(), 1e-6);
    CHECK(testing::rel_err(ng.score_natural(x), fd) < 1e-5);
    const Vec fde = testing::central_diff(
        [&](const Vec& flat) { return NaturalGaussian::from_flat(d, flat).entropy(); }, ng.flat(), 1e-6);
    CHECK(testing::rel_err(ng.entropy_gradient(), fde) < 1e-5);
  }
  CHECK(NaturalGaussian::standard(1).score_natural(Vec::Zero(1))[0] == 0.0);
}

TEST_CASE("score has zero mean") {
  Stream s(4, Purpose::kTest);
  const auto ng = random_gaussian(s, 2);
  const int n = 100000;
  const Eigen::Index k = natural_size(2);
  Vec sum = Vec::Zero(k), sq = Vec::Zero(k);
  for (int r = 0; r < n; ++r) {
    const Vec sc = ng.score_natural(ng.sample(s));
    sum += sc;
    sq += sc.cwiseAbs2();
  }
  const Vec mean = sum / n;
  const Vec se = ((sq / n - mean.cwiseAbs2()) / n).cwiseSqrt();
  for (Eigen::Index c = 0; c < k; ++c) CHECK(std::abs(mean[c]) < 4 * se[c]);
}

TEST_CASE("sampling moments") {
  Stream s(5, Purpose::kTest);
  const auto ng = random_gaussian(s, 3);
  const int n = 100000;
  RowMat x(n, 3);
  for (int r = 0; r < n; ++r) x.row(r) = ng.sample(s).transpose();
  const Vec m = x.colwise().mean().transpose();
  const RowMat c = x.rowwise() - m.transpose();
  const Mat cov = c.transpose() * c / (n - 1);
  const Mat& S = ng.covariance();
  for (int a = 0; a < 3; ++a) {
    CHECK(std::abs(m[a] - ng.mean()[a]) < 3 * std::sqrt(S(a, a) / n));
    for (int b = 0; b < 3; ++b) {
      const double se = std::sqrt((S(a, a) * S(b, b) + S(a, b) * S(a, b)) / n);
      CHECK(std::abs(cov(a, b) - S(a, b)) < 3 * se);
    }
  }
}

TEST_CASE("add_natural") {
  Stream s(6, Purpose::kTest);
  const auto a = random_gaussian(s, 3);
  const auto same = add_natural(a, NaturalIncrement::zero(3));
  CHECK(same.eta1() == a.eta1());
  CHECK(same.eta2() == a.eta2());

  const auto prod = add_natural(NaturalGaussian::standard(1), {Vec::Constant(1, 1.0), Mat::Constant(1, 1, -0.5)});
  const auto q = quad_moments([](double x) { return -0.5 * x * x + x - 0.5 * x * x; });
  CHECK(prod.mean()[0] == doctest::Approx(q.mean).epsilon(1e-8));
  CHECK(prod.covariance()(0, 0) == doctest::Approx(q.var).epsilon(1e-8));
  CHECK(prod.mean()[0] == doctest::Approx(0.5));
  CHECK(prod.covariance()(0, 0) == doctest::Approx(0.5));

  CHECK_THROWS_AS(add_natural(NaturalGaussian::standard(1), {Vec::Zero(1), Mat::Constant(1, 1, 1.0)}),
                  DegenerateKernelError);
}

TEST_CASE("conjugacy: the normalized product of densities is the summed-parameter density") {
  Stream s(7, Purpose::kTest);
  for (int rep = 0; rep < 5; ++rep) {
    const auto a = to_natural({Vec::Constant(1, s.normal()), Mat::Constant(1, 1, 0.3 + s.uniform())});
    const NaturalIncrement inc{Vec::Constant(1, s.normal()), Mat::Constant(1, 1, -0.2 * s.uniform())};
    const auto sum = add_natural(a, inc);
    auto log_prod = [&](double x) {
      return a.log_pdf(Vec::Constant(1, x)) + inc.eta1[0] * x + inc.eta2(0, 0) * x * x;
    };
    const double z = testing::trapezoid([&](double x) { return std::exp(log_prod(x)); }, -25, 25, 200000);
    for (double x = -4; x <= 4; x += 0.25) {
      const double want = std::exp(log_prod(x)) / z;
      CHECK(std::abs(std::exp(sum.log_pdf(Vec::Constant(1, x))) - want) < 1e-8);
    }
  }
}

TEST_CASE("degenerate natural parameters are rejected") {
  CHECK_THROWS_AS(scalar(0.0, 0.0), DegenerateKernelError);
  CHECK_THROWS_AS(scalar(0.0, 0.5), DegenerateKernelError);
  CHECK_THROWS_AS(NaturalGaussian(Vec::Zero(2), Mat::Identity(3, 3)), ParameterError);
  CHECK_THROWS_AS(scalar(std::nan(""), -1.0), DegenerateKernelError);
}
