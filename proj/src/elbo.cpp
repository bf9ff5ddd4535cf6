#include "seqvar/elbo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

#include <Eigen/Eigenvalues>

#include "seqvar/linalg.hpp"

namespace seqvar {
namespace {

// Runs fn(block) for every block index; block boundaries never depend on the
// number of workers, so the arithmetic of each row is the same for any count.
template <class Fn>
void for_blocks(Eigen::Index n_blocks, int workers, Fn&& fn) {
  if (workers <= 1 || n_blocks <= 1) {
    for (Eigen::Index b = 0; b < n_blocks; ++b) fn(b);
    return;
  }
  std::atomic<Eigen::Index> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto run = [&] {
    try {
      for (Eigen::Index b = next++; b < n_blocks && !failed; b = next++) fn(b);
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  const int n = static_cast<int>(std::min<Eigen::Index>(workers, n_blocks));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(n) - 1);
  for (int w = 1; w < n; ++w) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// Backward-kernel pieces shared by every particle at step t: the kernel
// precision does not depend on x_t.
struct KernelGeometry {
  Mat lam;     // precision of q_{t-1|t}
  Mat cov;     // its inverse
  Vec eta1_prev;
  double log_norm = 0.0;
  double entropy = 0.0;
};

KernelGeometry kernel_geometry(const NaturalGaussian& q_prev, const Potential& pot) {
  KernelGeometry g;
  g.lam = symmetrize(-2.0 * (q_prev.eta2() + pot.eta2()));
  Eigen::LLT<Mat> llt(g.lam);
  if (llt.info() != Eigen::Success) {
    throw DegenerateKernelError("kernel degenerate: backward precision is not positive definite");
  }
  const Mat lower = llt.matrixL();
  g.cov = symmetrize(llt.solve(Mat::Identity(g.lam.rows(), g.lam.cols())));
  g.eta1_prev = q_prev.eta1();
  const auto d = static_cast<double>(g.lam.rows());
  g.log_norm = lower.diagonal().array().log().sum() - 0.5 * d * log_two_pi();
  g.entropy = 0.5 * d - g.log_norm;
  return g;
}

RowMat outer_rows(const RowMat& x) {
  const Eigen::Index d = x.cols();
  RowMat out(x.rows(), d * d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index a = 0; a < d; ++a) {
      for (Eigen::Index b = 0; b < d; ++b) out(i, a * d + b) = x(i, a) * x(i, b);
    }
  }
  return out;
}

ParticleCloud draw_cloud(const StepOutput& step, Eigen::Index N, std::uint64_t seed, int t,
                         const EstimatorOptions& opts) {
  require(N >= 1, "particle count must be at least 1");
  ParticleCloud c;
  c.t = t;
  c.q = step.q;
  c.q_jacobian = step.q_jacobian;
  c.block = step.block;
  const Eigen::Index d = step.q.dim();
  c.xi.resize(N, d);
  for (Eigen::Index i = 0; i < N; ++i) {
    Stream rng(seed, Purpose::kParticles, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i));
    c.xi.row(i) = step.q.sample(rng).transpose();
  }
  c.logq = step.q.log_pdf_rows(c.xi);
  c.H.resize(N);
  if (opts.compute_gradient) c.G.setZero(N, step.block.size);
  return c;
}

bool shares_coordinates(const ParticleCloud& prev, const StepOutput& step) {
  return prev.G.size() > 0 && prev.block == step.block;
}

// Kernel scores are (x - mu, vec(x x^T - cov - mu mu^T)). On entry each row of
// `up` holds sum_j c_ij (x_j, vec x_j x_j^T); this subtracts a_i (mu_i, vec(cov + mu_i mu_i^T)).
void finish_upstream(RowMat& up, const RowMat& mu, const Vec& a, const Mat& cov) {
  const Eigen::Index d = mu.cols();
  for (Eigen::Index i = 0; i < up.rows(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) up(i, k) -= a[i] * mu(i, k);
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) {
        up(i, d + r * d + c) -= a[i] * (cov(r, c) + mu(i, r) * mu(i, c));
      }
    }
  }
}

// d entropy / d eta of every kernel is (0, vec cov).
void add_kernel_entropy(RowMat& up, const Mat& cov) {
  const Eigen::Index d = cov.rows();
  for (Eigen::Index i = 0; i < up.rows(); ++i) {
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) up(i, d + r * d + c) += cov(r, c);
    }
  }
}

// G_i += up_i . J_{t-1} (shared coordinates) and the potential pull-back.
void add_kernel_gradient(const RowMat& up, const RowMat& xs, const Potential& pot,
                         const Mat* prev_jacobian, const ParamBlock& block,
                         Eigen::Ref<RowMat> g_rows) {
  if (prev_jacobian != nullptr) g_rows.noalias() += up * (*prev_jacobian);
  RowMat pg = RowMat::Zero(xs.rows(), pot.block().size);
  pot.vjp_rows(xs, up, pg);
  const Eigen::Index off = pot.block().offset - block.offset;
  require(off >= 0 && off + pot.block().size <= block.size,
          "potential parameters must lie inside the gradient block");
  g_rows.middleCols(off, pot.block().size) += pg;
}

}  // namespace

nlohmann::json GradientEstimate::diagnostics() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"t", t}, {"elbo", num(elbo)}, {"grad_norm", num(grad_norm())},
          {"ess_min", num(ess_min)}, {"acc_rate", num(acc_rate)}};
}

double h_increment(const SsmModel& model, const Vec& x, const Vec& y) {
  return model.log_ell(0, nullptr, x, y);
}

double h_increment(const SsmModel& model, const NaturalGaussian& q_prev, const Potential& pot, int t,
                   const Vec& x_prev, const Vec& x, const Vec& y) {
  require(t >= 1, "h_increment with a previous state needs t >= 1");
  const NaturalGaussian kern = VariationalFamily::backward_kernel(q_prev, pot, x);
  return model.log_ell(t, &x_prev, x, y) - kern.log_pdf(x_prev);
}

ParticleCloud init_cloud(const StepOutput& step, const SsmModel& model, const Vec& y0,
                         Eigen::Index N, std::uint64_t seed, const EstimatorOptions& opts) {
  ParticleCloud c = draw_cloud(step, N, seed, 0, opts);
  const Vec em = model.log_emission_rows(c.xi, y0);
  for (Eigen::Index i = 0; i < N; ++i) c.H[i] = model.log_initial(c.xi.row(i).transpose()) + em[i];
  c.ess_min = std::numeric_limits<double>::quiet_NaN();
  c.acc_rate = std::numeric_limits<double>::quiet_NaN();
  return c;
}

Vec snis_weights(const ParticleCloud& prev, const Potential& pot, const Vec& x_t) {
  const Vec e1 = pot.eta1(x_t);
  Vec lw = prev.xi * e1;
  for (Eigen::Index j = 0; j < lw.size(); ++j) {
    const Vec x = prev.xi.row(j).transpose();
    lw[j] += x.dot(pot.eta2() * x);
  }
  const double mx = lw.maxCoeff();
  if (!std::isfinite(mx)) throw WeightDegeneracyError("backward weights are not finite");
  Vec w = (lw.array() - mx).exp();
  const double s = w.sum();
  if (!(s > 0.0) || !std::isfinite(s)) throw WeightDegeneracyError("backward weights underflowed");
  return w / s;
}

ParticleCloud propagate_full(const ParticleCloud& prev, const StepOutput& step, const Potential& pot,
                             const SsmModel& model, const Vec& y, Eigen::Index N,
                             std::uint64_t seed, const EstimatorOptions& opts) {
  const int t = prev.t + 1;
  ParticleCloud c = draw_cloud(step, N, seed, t, opts);
  const Eigen::Index d = c.xi.cols();
  const Eigen::Index np = prev.size();
  const KernelGeometry geo = kernel_geometry(prev.q, pot);

  const RowMat& xp = prev.xi;
  const auto wm = model.whiten_transition_means(xp);
  const Vec em = model.log_emission_rows(c.xi, y);
  const bool grads = opts.compute_gradient;
  const bool shared = grads && shares_coordinates(prev, step);
  const RowMat xxp = grads ? outer_rows(xp) : RowMat();

  // log psi_ij = e1_i . xp_j + quad_pot_j, and
  // V_ij = H_j + h_ij = [wx_i . w_j - e1_i . xp_j] + row_i + col_j with
  // wx_i the whitened x_i and w_j the whitened transition mean of xp_j.
  // With the kernel entropy in closed form the bracket loses its second term.
  const bool rb = opts.kernel_entropy;
  Vec quad_pot(np), col(np);
  RowMat right(np, 2 * d);
  {
    const RowMat xe2 = xp * pot.eta2();
    const RowMat xlam = xp * geo.lam;
    const Vec xp_eta1 = xp * geo.eta1_prev;
    for (Eigen::Index j = 0; j < np; ++j) {
      quad_pot[j] = xe2.row(j).dot(xp.row(j));
      col[j] = prev.H[j] - 0.5 * wm.sq[j];
      if (!rb) col[j] += -xp_eta1[j] + 0.5 * xlam.row(j).dot(xp.row(j));
    }
    right.leftCols(d) = wm.w.transpose();
    if (rb) {
      right.rightCols(d).setZero();
    } else {
      right.rightCols(d) = xp;
    }
  }

  const Eigen::Index br = std::max<Eigen::Index>(1, opts.block_rows);
  const Eigen::Index n_blocks = (N + br - 1) / br;
  Vec ess(N);
  RowMat anc(N, d);

  for_blocks(n_blocks, opts.workers, [&](Eigen::Index b) {
    const Eigen::Index r0 = b * br;
    const Eigen::Index nb = std::min(br, N - r0);
    const RowMat xs = c.xi.middleRows(r0, nb);
    const RowMat e1 = pot.eta1_rows(xs);

    // Normalized backward weights.
    RowMat w = e1 * xp.transpose();
    w.rowwise() += quad_pot.transpose();
    for (Eigen::Index i = 0; i < nb; ++i) {
      auto wr = w.row(i);
      const double mx = wr.maxCoeff();
      if (!std::isfinite(mx)) throw WeightDegeneracyError("backward weights are not finite");
      wr = (wr.array() - mx).exp();
      const double s = wr.sum();
      if (!(s > 0.0) || !std::isfinite(s)) throw WeightDegeneracyError("backward weights underflowed");
      wr /= s;
      ess[r0 + i] = 1.0 / wr.squaredNorm();
    }

    // Kernel means mu_i = cov (eta1_prev + e1_i).
    RowMat nat = e1;
    nat.rowwise() += geo.eta1_prev.transpose();
    const RowMat mu = nat * geo.cov;
    RowMat left(nb, 2 * d);
    left.leftCols(d) = model.whiten_states(xs).transpose();
    left.rightCols(d) = -e1;
    Vec row(nb);
    for (Eigen::Index i = 0; i < nb; ++i) {
      row[i] = wm.log_norm - 0.5 * left.row(i).head(d).squaredNorm() + em[r0 + i] +
               (rb ? geo.entropy : 0.5 * nat.row(i).dot(mu.row(i)) - geo.log_norm);
    }
    RowMat v = left * right.transpose();
    v.rowwise() += col.transpose();
    v.colwise() += row;

    const Vec hs = w.cwiseProduct(v).rowwise().sum();
    c.H.segment(r0, nb) = hs;
    anc.middleRows(r0, nb) = w * xp;

    if (!grads) return;
    // Centering on hs_i makes this the exact derivative of the normalized weights.
    RowMat coef = v;
    coef.colwise() -= hs;
    coef = coef.cwiseProduct(w);
    const Vec a = coef.rowwise().sum();
    RowMat up(nb, natural_size(d));
    up.leftCols(d) = coef * xp;
    up.rightCols(d * d) = coef * xxp;
    finish_upstream(up, mu, a, geo.cov);
    if (rb) add_kernel_entropy(up, geo.cov);

    auto g_rows = c.G.middleRows(r0, nb);
    if (shared) g_rows.noalias() = w * prev.G;
    add_kernel_gradient(up, xs, pot, shared ? &prev.q_jacobian : nullptr, c.block, g_rows);
  });

  c.ess_min = ess.minCoeff();
  c.acc_rate = 1.0;
  c.one_step_mean = anc.colwise().mean().transpose();
  return c;
}

ParticleCloud propagate_backward_sampled(const ParticleCloud& prev, const StepOutput& step,
                                         const Potential& pot, const SsmModel& model,
                                         const Vec& y, Eigen::Index N, int M, std::uint64_t seed,
                                         const EstimatorOptions& opts) {
  require(M >= 1, "backward draws M must be at least 1");
  const int t = prev.t + 1;
  ParticleCloud c = draw_cloud(step, N, seed, t, opts);
  const Eigen::Index d = c.xi.cols();
  const Eigen::Index np = prev.size();
  const KernelGeometry geo = kernel_geometry(prev.q, pot);
  const RowMat& xp = prev.xi;

  Vec quad_pot(np);
  {
    const Mat xe2 = xp * pot.eta2();
    for (Eigen::Index j = 0; j < np; ++j) quad_pot[j] = xe2.row(j).dot(xp.row(j));
  }
  // sup_x e1.x + x^T eta2 x = 1/4 e1^T (-eta2)^{-1} e1 through the eigenbasis of -eta2.
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(-pot.eta2()));
  const Vec ev = es.eigenvalues();
  const Mat evec = es.eigenvectors();
  const double ev_tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());

  const auto wm = model.whiten_transition_means(xp);
  const Vec em = model.log_emission_rows(c.xi, y);
  const bool grads = opts.compute_gradient;
  const bool shared = grads && shares_coordinates(prev, step);
  const Eigen::Index max_trials =
      static_cast<Eigen::Index>(std::max(1, opts.max_trials_per_draw)) * M;

  const Eigen::Index br = std::max<Eigen::Index>(1, opts.block_rows);
  const Eigen::Index n_blocks = (N + br - 1) / br;
  std::vector<Eigen::Index> trials(static_cast<std::size_t>(n_blocks), 0);
  RowMat anc(N, d);

  for_blocks(n_blocks, opts.workers, [&](Eigen::Index b) {
    const Eigen::Index r0 = b * br;
    const Eigen::Index nb = std::min(br, N - r0);
    const RowMat xs = c.xi.middleRows(r0, nb);
    const RowMat e1 = pot.eta1_rows(xs);
    RowMat nat = e1;
    nat.rowwise() += geo.eta1_prev.transpose();
    const RowMat mu = nat * geo.cov;
    const Mat wx = model.whiten_states(xs);
    RowMat up = grads ? RowMat::Zero(nb, natural_size(d)) : RowMat();
    if (shared) c.G.middleRows(r0, nb).setZero();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(M));
    Vec vals(M);

    for (Eigen::Index i = 0; i < nb; ++i) {
      const Eigen::Index gi = r0 + i;
      Stream rng(seed, Purpose::kBackward, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(gi));
      const Vec e = e1.row(i).transpose();
      auto log_psi = [&](Eigen::Index j) { return xp.row(j).dot(e) + quad_pot[j]; };

      const Vec proj = evec.transpose() * e;
      double sup = 0.0;
      bool bounded = true;
      for (Eigen::Index k = 0; k < d; ++k) {
        if (ev[k] > ev_tol) {
          sup += 0.25 * proj[k] * proj[k] / ev[k];
        } else if (std::abs(proj[k]) > 1e-12) {
          bounded = false;
        }
      }

      int got = 0;
      Eigen::Index tried = 0;
      if (bounded) {
        while (got < M && tried < max_trials) {
          const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(np)));
          ++tried;
          if (std::log(rng.uniform()) <= log_psi(j) - sup) idx[static_cast<std::size_t>(got++)] = j;
        }
      }
      trials[static_cast<std::size_t>(b)] += tried;
      if (got < M) {
        // Exact multinomial draws for the remaining indices.
        Vec lw(np);
        for (Eigen::Index j = 0; j < np; ++j) lw[j] = log_psi(j);
        const double mx = lw.maxCoeff();
        if (!std::isfinite(mx)) throw WeightDegeneracyError("backward weights are not finite");
        Vec cdf = (lw.array() - mx).exp();
        for (Eigen::Index j = 1; j < np; ++j) cdf[j] += cdf[j - 1];
        const double total = cdf[np - 1];
        if (!(total > 0.0)) throw WeightDegeneracyError("backward weights underflowed");
        for (; got < M; ++got) {
          const double u = rng.uniform() * total;
          const auto it = std::lower_bound(cdf.data(), cdf.data() + np, u);
          idx[static_cast<std::size_t>(got)] =
              std::min<Eigen::Index>(np - 1, static_cast<Eigen::Index>(it - cdf.data()));
        }
      }

      // V_k = H_j + log h(xp_j, x_i) + log m(x_i, y) - log k_i(xp_j), the last
      // term replaced by the kernel entropy when that is taken in closed form.
      const double logm_i = em[gi];
      Vec a_mean = Vec::Zero(d);
      for (int k = 0; k < M; ++k) {
        const Eigen::Index j = idx[static_cast<std::size_t>(k)];
        const double lt = wm.log_norm - 0.5 * (wx.col(i) - wm.w.col(j)).squaredNorm();
        double neg_lk = geo.entropy;
        if (!opts.kernel_entropy) {
          const Vec diff = xp.row(j).transpose() - mu.row(i).transpose();
          neg_lk = 0.5 * diff.dot(geo.lam * diff) - geo.log_norm;
        }
        vals[k] = prev.H[j] + lt + logm_i + neg_lk;
        a_mean += xp.row(j).transpose();
      }
      anc.row(gi) = (a_mean / M).transpose();
      const double h = vals.mean();
      c.H[gi] = h;
      if (!grads) continue;
      // Leave-one-out baseline: (v_k - mean of the others) / M = (v_k - h) / (M - 1).
      // Including v_k itself would shrink the score term by (M - 1) / M.
      const double cv = M > 1 ? h : 0.0;
      const double scale = M > 1 ? 1.0 / (M - 1) : 1.0;
      for (int k = 0; k < M; ++k) {
        const Eigen::Index j = idx[static_cast<std::size_t>(k)];
        const double coef = (vals[k] - cv) * scale;
        const Vec x = xp.row(j).transpose();
        const Vec m = mu.row(i).transpose();
        up.row(i).head(d) += coef * (x - m).transpose();
        for (Eigen::Index r = 0; r < d; ++r) {
          for (Eigen::Index s = 0; s < d; ++s) {
            up(i, d + r * d + s) += coef * (x[r] * x[s] - geo.cov(r, s) - m[r] * m[s]);
          }
        }
        if (shared) c.G.row(gi) += prev.G.row(j) / M;
      }
    }
    if (grads) {
      if (opts.kernel_entropy) add_kernel_entropy(up, geo.cov);
      add_kernel_gradient(up, xs, pot, shared ? &prev.q_jacobian : nullptr, c.block,
                          c.G.middleRows(r0, nb));
    }
  });

  Eigen::Index total_trials = 0;
  for (const auto tr : trials) total_trials += tr;
  c.acc_rate = total_trials > 0 ? static_cast<double>(N) * M / static_cast<double>(total_trials)
                                : std::numeric_limits<double>::quiet_NaN();
  if (c.acc_rate > 1.0) c.acc_rate = std::numeric_limits<double>::quiet_NaN();
  c.ess_min = std::numeric_limits<double>::quiet_NaN();
  c.one_step_mean = anc.colwise().mean().transpose();
  return c;
}

GradientEstimate finalize(const ParticleCloud& cloud, const EstimatorOptions& opts) {
  return finalize(cloud, cloud.q, cloud.q_jacobian, opts);
}

GradientEstimate finalize(const ParticleCloud& cloud, const NaturalGaussian& q_score,
                          const Mat& q_jacobian, const EstimatorOptions& opts) {
  const Eigen::Index N = cloud.size();
  require(N >= 1, "finalize: empty cloud");
  GradientEstimate g;
  g.t = cloud.t;
  g.N = N;
  g.block = cloud.block;
  g.ess_min = cloud.ess_min;
  g.acc_rate = cloud.acc_rate;
  g.elbo = (cloud.H - cloud.logq).mean();
  if (!opts.compute_gradient) {
    g.grad = Vec::Zero(cloud.block.size);
    return g;
  }
  require(q_jacobian.cols() == cloud.block.size, "finalize: Jacobian does not match the block");
  g.grad = cloud.G.colwise().mean().transpose();
  // Baseline is the mean of the other particles, which keeps the estimate unbiased:
  // (H_i - mean_{k != i} H_k) / N = (H_i - hbar) / (N - 1).
  const double hbar = opts.control_variate ? cloud.H.mean() : 0.0;
  const double scale = opts.control_variate && N > 1 ? 1.0 / static_cast<double>(N - 1)
                                                     : 1.0 / static_cast<double>(N);
  const Eigen::Index d = q_score.dim();
  Vec u = Vec::Zero(natural_size(d));
  for (Eigen::Index i = 0; i < N; ++i) {
    const double w = (cloud.H[i] - hbar) * scale;
    if (w != 0.0) u += w * q_score.score_natural(cloud.xi.row(i).transpose());
  }
  if (opts.analytic_entropy) u += q_score.entropy_gradient();
  g.grad.noalias() += q_jacobian.transpose() * u;
  if (!g.grad.allFinite() || !std::isfinite(g.elbo)) {
    throw NumericError("non-finite ELBO or gradient estimate at t=" + std::to_string(cloud.t));
  }
  return g;
}

// ---------------------------------------------------------------- online estimator

OnlineEstimator::OnlineEstimator(const VariationalFamily& family, const SsmModel& model,
                                 SamplerConfig sampler, EstimatorOptions opts)
    : family_(family), model_(model), sampler_(sampler), opts_(opts) {
  require(sampler_.N >= 1, "N must be at least 1");
  require(sampler_.M >= 0, "M must be non-negative");
}

GradientEstimate OnlineEstimator::evaluate(const Vec& lambda, const Vec& y, const Vec* score_lambda) {
  const FamilyState* prev_state = has_cloud_ ? &state_ : nullptr;
  StepOutput so = family_.step(lambda, prev_state, y, t_);
  if (t_ == 0) {
    pending_cloud_ = init_cloud(so, model_, y, sampler_.N, sampler_.seed, opts_);
  } else {
    const auto pot = family_.potential(lambda, t_);
    pending_cloud_ =
        sampler_.M == 0
            ? propagate_full(cloud_, so, *pot, model_, y, sampler_.N, sampler_.seed, opts_)
            : propagate_backward_sampled(cloud_, so, *pot, model_, y, sampler_.N, sampler_.M,
                                         sampler_.seed, opts_);
  }
  GradientEstimate g;
  if (score_lambda != nullptr && opts_.compute_gradient &&
      score_lambda->size() >= so.block.offset + so.block.size) {
    const StepOutput alt = family_.step(*score_lambda, prev_state, y, t_);
    g = finalize(pending_cloud_, alt.q, alt.q_jacobian, opts_);
  } else {
    g = finalize(pending_cloud_, opts_);
  }
  g.M = sampler_.M;
  pending_state_ = std::move(so.state);
  has_pending_ = true;
  return g;
}

void OnlineEstimator::commit() {
  require(has_pending_, "commit without a pending evaluation");
  cloud_ = std::move(pending_cloud_);
  state_ = std::move(pending_state_);
  has_cloud_ = true;
  has_pending_ = false;
  ++t_;
}

void OnlineEstimator::restore(int t, ParticleCloud cloud, FamilyState state) {
  require(t >= 1 && cloud.t == t - 1, "restore: cloud does not precede time t");
  require(cloud.size() == sampler_.N, "restore: cloud size differs from N");
  t_ = t;
  cloud_ = std::move(cloud);
  state_ = std::move(state);
  has_cloud_ = true;
  has_pending_ = false;
}

GradientEstimate estimate_sequence(const VariationalFamily& family, const Vec& lambda,
                                   const SsmModel& model, const RowMat& ys,
                                   const SamplerConfig& sampler, const EstimatorOptions& opts) {
  require(ys.rows() >= 1, "estimate_sequence: empty observation sequence");
  OnlineEstimator est(family, model, sampler, opts);
  GradientEstimate g;
  for (Eigen::Index t = 0; t < ys.rows(); ++t) g = est.step(lambda, ys.row(t).transpose());
  return g;
}

}  // namespace seqvar
