#include "seqvar/oracle.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

#include <unsupported/Eigen/AutoDiff>

#include "seqvar/linalg.hpp"

namespace seqvar {
namespace {

using AD = Eigen::AutoDiffScalar<Eigen::VectorXd>;

template <class S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

inline double value_of(double x) { return x; }
inline double value_of(const AD& x) { return x.value(); }

template <class S>
S softplus_t(const S& x) {
  using std::exp;
  using std::log;
  if (value_of(x) > 30.0) return x;
  return log(1.0 + exp(x));
}

// Compound assignment of an autodiff expression onto a scalar with no
// derivatives yet reads past the end of the empty vector, hence the S(...)
// wrappers on every += and -= below.

// Cholesky factor of a symmetric positive-definite matrix (lower).
template <class S>
MatT<S> chol(const MatT<S>& a) {
  using std::sqrt;
  const Eigen::Index n = a.rows();
  MatT<S> l = MatT<S>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    S s = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) s -= S(l(j, k) * l(j, k));
    if (!(value_of(s) > 0.0)) throw DegenerateKernelError("matrix is not positive definite");
    l(j, j) = sqrt(s);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      S v = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) v -= S(l(i, k) * l(j, k));
      l(i, j) = v / l(j, j);
    }
  }
  return l;
}

template <class S>
S logdet_from_chol(const MatT<S>& l) {
  using std::log;
  S s(0.0);
  for (Eigen::Index i = 0; i < l.rows(); ++i) s += S(log(l(i, i)));
  return 2.0 * s;
}

// Inverse from a Cholesky factor, symmetrized.
template <class S>
MatT<S> inverse_from_chol(const MatT<S>& l) {
  const Eigen::Index n = l.rows();
  MatT<S> linv = MatT<S>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      S s(0.0);
      for (Eigen::Index k = j; k < i; ++k) s -= S(l(i, k) * linv(k, j));
      linv(i, j) = s / l(i, i);
    }
  }
  MatT<S> inv = linv.transpose() * linv;
  return (0.5 * (inv + inv.transpose())).eval();
}

template <class S>
MatT<S> spd_inverse_t(const MatT<S>& a) {
  return inverse_from_chol<S>(chol<S>(a));
}

template <class S>
MatT<S> unpack_t(const VecT<S>& lambda, Eigen::Index off, Eigen::Index d, bool softplus_diag) {
  MatT<S> l = MatT<S>::Zero(d, d);
  Eigen::Index k = off;
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c <= r; ++c, ++k) {
      l(r, c) = (r == c && softplus_diag) ? softplus_t<S>(lambda[k]) : lambda[k];
    }
  }
  return l;
}

template <class S>
MatT<S> row_major_t(const VecT<S>& lambda, Eigen::Index off, Eigen::Index rows, Eigen::Index cols) {
  MatT<S> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = lambda[off + r * cols + c];
  }
  return m;
}

template <class S>
S trace_product(const MatT<S>& a, const MatT<S>& b) {
  S s(0.0);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) s += S(a(i, j) * b(j, i));
  }
  return s;
}

// Marginal precisions and eta1 of a conjugate family, plus its kernel matrices.
template <class S>
struct ConjugatePass {
  std::vector<MatT<S>> lam;
  std::vector<VecT<S>> eta1;
  MatT<S> A;
  MatT<S> Qi;
};

template <class S>
ConjugatePass<S> conjugate_pass(const ConjugateFamily& fam, const VecT<S>& lambda, const RowMat& ys) {
  const ParamLayout& lay = fam.layout();
  const Eigen::Index d = fam.dim();
  const Eigen::Index dy = fam.config().dim_y;
  ConjugatePass<S> out;
  const VecT<S> m0 = lambda.segment(lay.at("prior_mean").offset, d);
  const MatT<S> l0 = unpack_t<S>(lambda, lay.at("prior_chol").offset, d, true);
  out.A = row_major_t<S>(lambda, lay.at("transition_matrix").offset, d, d);
  const MatT<S> lq = unpack_t<S>(lambda, lay.at("transition_chol").offset, d, true);
  const MatT<S> q = lq * lq.transpose();
  out.Qi = spd_inverse_t<S>(q);
  const MatT<S> lr = row_major_t<S>(lambda, lay.at("obs_precision_factor").offset, d, d);
  const MatT<S> obs_lam = lr * lr.transpose();
  const S* obs_params = lambda.data() + lay.at("obs_map").offset;

  MatT<S> lam = spd_inverse_t<S>(MatT<S>(l0 * l0.transpose()));
  VecT<S> e1 = lam * m0;
  for (Eigen::Index t = 0; t < ys.rows(); ++t) {
    if (t > 0) {
      const MatT<S> p = spd_inverse_t<S>(lam);
      const VecT<S> m = p * e1;
      const MatT<S> pn = out.A * p * out.A.transpose() + q;
      lam = spd_inverse_t<S>(MatT<S>(0.5 * (pn + pn.transpose())));
      e1 = lam * (out.A * m);
    }
    VecT<S> y(dy);
    for (Eigen::Index k = 0; k < dy; ++k) y[k] = S(ys(t, k));
    lam = lam + obs_lam;
    e1 = e1 + fam.obs_map().forward_generic<S>(obs_params, y);
    out.lam.push_back(lam);
    out.eta1.push_back(e1);
  }
  return out;
}

template <class S>
MatT<S> cast_mat(const Mat& m) {
  return m.cast<S>();
}

template <class S>
S closed_form_elbo_t(const ConjugateFamily& fam, const VecT<S>& lambda, const LgssmParams& mp,
                     const RowMat& ys) {
  using std::log;
  const Eigen::Index d = fam.dim();
  const double l2pi = log_two_pi();
  const ConjugatePass<S> pass = conjugate_pass<S>(fam, lambda, ys);

  const Mat q0i = Covariance(mp.Q0).inverse();
  const Mat qi = Covariance(mp.Q).inverse();
  const Mat ri = Covariance(mp.R).inverse();
  const double ld_q0 = Covariance(mp.Q0).log_det();
  const double ld_q = Covariance(mp.Q).log_det();
  const double ld_r = Covariance(mp.R).log_det();
  const auto dyd = static_cast<double>(mp.dim_y());
  const auto dd = static_cast<double>(d);
  const Mat btri = mp.B.transpose() * ri;
  const Mat em_u2 = -0.5 * btri * mp.B;

  auto emission = [&](Eigen::Index t, MatT<S>& U, VecT<S>& u, S& c) {
    const Vec y = ys.row(t).transpose();
    U += cast_mat<S>(em_u2);
    u += (btri * y).cast<S>();
    c += -0.5 * y.dot(ri * y) - 0.5 * (ld_r + dyd * l2pi);
  };

  MatT<S> U = cast_mat<S>(-0.5 * q0i);
  VecT<S> u = (q0i * mp.mu0).cast<S>();
  S c = S(-0.5 * mp.mu0.dot(q0i * mp.mu0) - 0.5 * (ld_q0 + dd * l2pi));
  emission(0, U, u, c);

  const MatT<S> as = cast_mat<S>(mp.A);
  const MatT<S> qis = cast_mat<S>(qi);
  const MatT<S> atqia = cast_mat<S>(Mat(mp.A.transpose() * qi * mp.A));
  const MatT<S> eye = MatT<S>::Identity(d, d);
  const MatT<S> ct = pass.A.transpose() * pass.Qi;        // A^T Q^{-1} (variational)
  const MatT<S> kern_quad = ct * pass.A;

  for (Eigen::Index t = 1; t < ys.rows(); ++t) {
    const MatT<S> kl = chol<S>(MatT<S>(pass.lam[t - 1] + kern_quad));
    const MatT<S> sk = inverse_from_chol<S>(kl);
    const MatT<S> F = sk * ct;
    const VecT<S> f = sk * pass.eta1[t - 1];
    const MatT<S> G = eye - as * F;
    const VecT<S> g = as * f;
    const MatT<S> Un = F.transpose() * U * F - 0.5 * G.transpose() * qis * G;
    const VecT<S> un = 2.0 * F.transpose() * (U * f) + F.transpose() * u + G.transpose() * (qis * g);
    const S entropy = 0.5 * (dd * (1.0 + l2pi) - logdet_from_chol<S>(kl));
    const S cn = f.dot(U * f) + u.dot(f) + c + trace_product<S>(U, sk) - 0.5 * g.dot(qis * g) -
                 0.5 * trace_product<S>(atqia, sk) - 0.5 * (ld_q + dd * l2pi) + entropy;
    U = 0.5 * (Un + Un.transpose());
    u = un;
    c = cn;
    emission(t, U, u, c);
  }

  const MatT<S> lt = chol<S>(pass.lam.back());
  const MatT<S> pt = inverse_from_chol<S>(lt);
  const VecT<S> mt = pt * pass.eta1.back();
  const S entropy = 0.5 * (dd * (1.0 + l2pi) - logdet_from_chol<S>(lt));
  return mt.dot(U * mt) + trace_product<S>(U, pt) + u.dot(mt) + c + entropy;
}

template <class S>
S student_t_log_pdf_t(const S& z, double dof, double scale) {
  using std::log;
  const double c = std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
                   0.5 * std::log(dof * std::numbers::pi) - std::log(scale);
  const S r = z / scale;
  return c - 0.5 * (dof + 1.0) * log(1.0 + r * r / dof);
}

// log p(x_{0:T}, y_{0:T}) for a path whose entries carry derivatives.
template <class S>
S log_joint_t(const SsmModel& model, const std::vector<VecT<S>>& xs, const RowMat& ys) {
  using std::tanh;
  const Eigen::Index d = model.state_dim();
  const Covariance& noise = model.transition_noise().density();
  const MatT<S> qi = cast_mat<S>(noise.inverse());
  const double l2pi = log_two_pi();
  const auto dd = static_cast<double>(d);
  S total(0.0);

  auto gauss = [&](const VecT<S>& diff, const MatT<S>& prec, double log_det) -> S {
    return S(-0.5 * (log_det + dd * l2pi)) - 0.5 * diff.dot(prec * diff);
  };

  if (model.kind() == ModelKind::kLgssm) {
    const auto& p = static_cast<const LgssmModel&>(model).params();
    const Covariance q0(p.Q0), r(p.R);
    const MatT<S> q0i = cast_mat<S>(q0.inverse());
    const MatT<S> ri = cast_mat<S>(r.inverse());
    const MatT<S> a = cast_mat<S>(p.A);
    const MatT<S> b = cast_mat<S>(p.B);
    total += S(gauss(VecT<S>(xs[0] - p.mu0.cast<S>()), q0i, q0.log_det()));
    for (std::size_t t = 0; t < xs.size(); ++t) {
      if (t > 0) total += S(gauss(VecT<S>(xs[t] - a * xs[t - 1]), qi, noise.log_det()));
      const VecT<S> y = ys.row(static_cast<Eigen::Index>(t)).transpose().cast<S>();
      const Eigen::Index dy = p.dim_y();
      total += S(S(-0.5 * (r.log_det() + static_cast<double>(dy) * l2pi)) -
               0.5 * VecT<S>(y - b * xs[t]).dot(ri * VecT<S>(y - b * xs[t])));
    }
    return total;
  }
  const auto& p = static_cast<const ChaoticRnnModel&>(model).params();
  const MatT<S> w = cast_mat<S>(p.W);
  const double rate = p.step / p.tau;
  total += S(gauss(xs[0], qi, noise.log_det()));
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (t > 0) {
      VecT<S> th(d);
      for (Eigen::Index k = 0; k < d; ++k) th[k] = tanh(xs[t - 1][k]);
      const VecT<S> mean = (1.0 - rate) * xs[t - 1] + (rate * p.gain) * (w * th);
      total += S(gauss(VecT<S>(xs[t] - mean), qi, noise.log_det()));
    }
    for (Eigen::Index k = 0; k < d; ++k) {
      total += S(student_t_log_pdf_t<S>(S(ys(static_cast<Eigen::Index>(t), k)) - xs[t][k],
                                      p.student_dof, p.student_scale));
    }
  }
  return total;
}

// One backward-sampled path and its log p - log q.
template <class S>
S path_log_ratio(const SsmModel& model, const ConjugatePass<S>& pass,
                 const std::vector<MatT<S>>& kern_chol, const std::vector<MatT<S>>& kern_cov,
                 const MatT<S>& last_chol, const MatT<S>& last_cov, const RowMat& ys, Stream& rng) {
  const auto n = static_cast<Eigen::Index>(pass.lam.size());
  const Eigen::Index d = model.state_dim();
  const double l2pi = log_two_pi();
  const auto dd = static_cast<double>(d);
  std::vector<VecT<S>> xs(static_cast<std::size_t>(n));
  S logq(0.0);
  // x = m + L^{-T} z for precision L L^T; log density at x is -|z|^2/2 + log|L| - d/2 log 2pi.
  auto draw = [&](const VecT<S>& mean, const MatT<S>& lchol) {
    const Vec z = rng.normal_vector(d);
    const VecT<S> zs = z.cast<S>();
    VecT<S> x = mean;
    VecT<S> v(d);
    for (Eigen::Index i = d - 1; i >= 0; --i) {
      S acc = zs[i];
      for (Eigen::Index k = i + 1; k < d; ++k) acc -= S(lchol(k, i) * v[k]);
      v[i] = acc / lchol(i, i);
      x[i] += v[i];
    }
    logq += S(S(-0.5 * z.squaredNorm() - 0.5 * dd * l2pi) + 0.5 * logdet_from_chol<S>(lchol));
    return x;
  };
  xs.back() = draw(VecT<S>(last_cov * pass.eta1.back()), last_chol);
  const MatT<S> ct = pass.A.transpose() * pass.Qi;
  for (Eigen::Index t = n - 1; t >= 1; --t) {
    const auto ti = static_cast<std::size_t>(t);
    const VecT<S> mean = kern_cov[ti] * (pass.eta1[ti - 1] + ct * xs[ti]);
    xs[ti - 1] = draw(mean, kern_chol[ti]);
  }
  return log_joint_t<S>(model, xs, ys) - logq;
}

template <class S>
VecT<S> backward_mc_t(const ConjugateFamily& fam, const VecT<S>& lambda, const SsmModel& model,
                      const RowMat& ys, Eigen::Index N, std::uint64_t seed) {
  const ConjugatePass<S> pass = conjugate_pass<S>(fam, lambda, ys);
  const auto n = pass.lam.size();
  std::vector<MatT<S>> kchol(n), kcov(n);
  const MatT<S> kern_quad = pass.A.transpose() * pass.Qi * pass.A;
  for (std::size_t t = 1; t < n; ++t) {
    kchol[t] = chol<S>(MatT<S>(pass.lam[t - 1] + kern_quad));
    kcov[t] = inverse_from_chol<S>(kchol[t]);
  }
  const MatT<S> lchol = chol<S>(pass.lam.back());
  const MatT<S> lcov = inverse_from_chol<S>(lchol);
  VecT<S> out(N);
  for (Eigen::Index k = 0; k < N; ++k) {
    Stream rng(seed, Purpose::kBackward, 0, static_cast<std::uint64_t>(k));
    out[k] = path_log_ratio<S>(model, pass, kchol, kcov, lchol, lcov, ys, rng);
  }
  return out;
}

VecT<AD> seeded(const Vec& lambda) {
  const Eigen::Index p = lambda.size();
  VecT<AD> out(p);
  for (Eigen::Index k = 0; k < p; ++k) out[k] = AD(lambda[k], p, k);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- Kalman

std::vector<GaussianBelief> kalman_filter(const LgssmParams& p, const RowMat& ys) {
  p.validate();
  require_dim(ys.cols(), p.dim_y(), "kalman_filter observations");
  const Eigen::Index d = p.dim_x();
  const Mat eye = Mat::Identity(d, d);
  std::vector<GaussianBelief> out;
  Vec m = p.mu0;
  Mat P = p.Q0;
  for (Eigen::Index t = 0; t < ys.rows(); ++t) {
    if (t > 0) {
      m = p.A * m;
      P = symmetrize(p.A * P * p.A.transpose() + p.Q);
    }
    const Mat s = symmetrize(p.B * P * p.B.transpose() + p.R);
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success) throw NumericError("innovation covariance is not positive definite");
    const Mat k = llt.solve(p.B * P).transpose();
    m = m + k * (ys.row(t).transpose() - p.B * m);
    const Mat ikb = eye - k * p.B;
    P = symmetrize(ikb * P * ikb.transpose() + k * p.R * k.transpose());
    out.push_back({m, P});
  }
  return out;
}

std::vector<GaussianBelief> rts_smoother(const LgssmParams& p,
                                         const std::vector<GaussianBelief>& filtered) {
  std::vector<GaussianBelief> out(filtered.size());
  if (filtered.empty()) return out;
  out.back() = filtered.back();
  for (std::size_t t = filtered.size() - 1; t-- > 0;) {
    const auto& f = filtered[t];
    const Mat pred = symmetrize(p.A * f.cov * p.A.transpose() + p.Q);
    Eigen::LLT<Mat> llt(pred);
    const Mat gain = llt.solve(p.A * f.cov).transpose();
    out[t].mean = f.mean + gain * (out[t + 1].mean - p.A * f.mean);
    out[t].cov = symmetrize(f.cov + gain * (out[t + 1].cov - pred) * gain.transpose());
  }
  return out;
}

double kalman_log_likelihood(const LgssmParams& p, const RowMat& ys) {
  p.validate();
  double ll = 0.0;
  Vec m = p.mu0;
  Mat P = p.Q0;
  const Mat eye = Mat::Identity(p.dim_x(), p.dim_x());
  for (Eigen::Index t = 0; t < ys.rows(); ++t) {
    if (t > 0) {
      m = p.A * m;
      P = symmetrize(p.A * P * p.A.transpose() + p.Q);
    }
    const Covariance s(p.B * P * p.B.transpose() + p.R);
    const Vec innov = ys.row(t).transpose() - p.B * m;
    ll += s.log_density(innov);
    const Mat k = Eigen::LLT<Mat>(s.matrix()).solve(p.B * P).transpose();
    m = m + k * innov;
    const Mat ikb = eye - k * p.B;
    P = symmetrize(ikb * P * ikb.transpose() + k * p.R * k.transpose());
  }
  return ll;
}

GaussianBelief kalman_backward_kernel(const LgssmParams& p, const GaussianBelief& filt_prev,
                                      const Vec& x_t) {
  const Mat s = symmetrize(p.A * filt_prev.cov * p.A.transpose() + p.Q);
  Eigen::LLT<Mat> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("predictive covariance is not positive definite");
  const Mat gain = llt.solve(p.A * filt_prev.cov).transpose();
  return {filt_prev.mean + gain * (x_t - p.A * filt_prev.mean),
          symmetrize(filt_prev.cov - gain * p.A * filt_prev.cov)};
}

RowMat kalman_one_step_means(const LgssmParams& p, const std::vector<GaussianBelief>& filtered) {
  const auto n = static_cast<Eigen::Index>(filtered.size());
  RowMat out(std::max<Eigen::Index>(n - 1, 0), p.dim_x());
  for (Eigen::Index t = 1; t < n; ++t) {
    const auto& prev = filtered[static_cast<std::size_t>(t - 1)];
    out.row(t - 1) =
        kalman_backward_kernel(p, prev, filtered[static_cast<std::size_t>(t)].mean).mean.transpose();
  }
  return out;
}

// ---------------------------------------------------------------- closed form

double closed_form_elbo(const ConjugateFamily& family, const Vec& lambda, const LgssmParams& params,
                        const RowMat& ys) {
  params.validate();
  require_dim(lambda.size(), family.layout().size(), "closed_form_elbo parameters");
  return closed_form_elbo_t<double>(family, lambda, params, ys);
}

std::pair<double, Vec> closed_form_elbo_and_grad(const ConjugateFamily& family, const Vec& lambda,
                                                 const LgssmParams& params, const RowMat& ys) {
  params.validate();
  require_dim(lambda.size(), family.layout().size(), "closed_form_elbo parameters");
  const AD v = closed_form_elbo_t<AD>(family, seeded(lambda), params, ys);
  Vec g = v.derivatives();
  if (g.size() == 0) g = Vec::Zero(lambda.size());
  return {v.value(), g};
}

Vec backward_mc_log_ratios(const ConjugateFamily& family, const Vec& lambda, const SsmModel& model,
                           const RowMat& ys, Eigen::Index N, std::uint64_t seed) {
  require(N >= 1, "backward_mc: N must be at least 1");
  return backward_mc_t<double>(family, lambda, model, ys, N, seed);
}

GradientEstimate backward_mc_elbo_grad(const ConjugateFamily& family, const Vec& lambda,
                                       const SsmModel& model, const RowMat& ys, Eigen::Index N,
                                       std::uint64_t seed, bool with_gradient) {
  require(N >= 1, "backward_mc: N must be at least 1");
  require_dim(lambda.size(), family.layout().size(), "backward_mc parameters");
  GradientEstimate g;
  g.t = static_cast<int>(ys.rows()) - 1;
  g.N = N;
  g.block = {0, lambda.size()};
  g.ess_min = std::numeric_limits<double>::quiet_NaN();
  g.acc_rate = std::numeric_limits<double>::quiet_NaN();
  if (!with_gradient) {
    g.elbo = backward_mc_t<double>(family, lambda, model, ys, N, seed).mean();
    g.grad = Vec::Zero(lambda.size());
    return g;
  }
  const VecT<AD> vals = backward_mc_t<AD>(family, seeded(lambda), model, ys, N, seed);
  double sum = 0.0;
  Vec grad = Vec::Zero(lambda.size());
  for (Eigen::Index k = 0; k < N; ++k) {
    sum += vals[k].value();
    if (vals[k].derivatives().size() == grad.size()) grad += vals[k].derivatives();
  }
  g.elbo = sum / static_cast<double>(N);
  g.grad = grad / static_cast<double>(N);
  return g;
}

void write_beliefs_csv(const std::vector<GaussianBelief>& beliefs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  if (beliefs.empty()) return;
  const Eigen::Index d = beliefs.front().mean.size();
  f << "t";
  for (Eigen::Index k = 0; k < d; ++k) f << ",mean_" << k;
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) f << ",cov_" << a << "_" << b;
  }
  f << "\n" << std::setprecision(17);
  for (std::size_t t = 0; t < beliefs.size(); ++t) {
    f << t;
    for (Eigen::Index k = 0; k < d; ++k) f << "," << beliefs[t].mean[k];
    for (Eigen::Index a = 0; a < d; ++a) {
      for (Eigen::Index b = 0; b < d; ++b) f << "," << beliefs[t].cov(a, b);
    }
    f << "\n";
  }
}

}  // namespace seqvar
