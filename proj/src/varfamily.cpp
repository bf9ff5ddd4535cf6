#include "seqvar/varfamily.hpp"

#include <algorithm>
#include <cmath>

#include "seqvar/linalg.hpp"

namespace seqvar {
namespace {

using ConstRowMap = Eigen::Map<const RowMat>;

std::span<const double> slice(const Vec& v, const ParamBlock& b) {
  return {v.data() + b.offset, static_cast<std::size_t>(b.size)};
}

std::vector<Eigen::Index> dims_of(Eigen::Index in, const std::vector<Eigen::Index>& hidden,
                                  Eigen::Index out) {
  std::vector<Eigen::Index> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

Mat unflat_eta2(const Vec& flat, Eigen::Index d) {
  Mat m(d, d);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) m(a, b) = flat[d + a * d + b];
  }
  return m;
}

void put_column(Mat& jac, Eigen::Index col, const Vec& d1, const Mat& d2) {
  jac.col(col) = flatten_natural(d1, d2);
}

Mat unit(Eigen::Index d, Eigen::Index a, Eigen::Index b) {
  Mat e = Mat::Zero(d, d);
  e(a, b) = 1.0;
  return e;
}

Mat spd_inverse(const Mat& m) {
  Eigen::LLT<Mat> llt(symmetrize(m));
  if (llt.info() != Eigen::Success) throw DegenerateKernelError("matrix is not positive definite");
  return symmetrize(llt.solve(Mat::Identity(m.rows(), m.cols())));
}

// Jacobian of Mlp outputs with respect to its own parameters (rows = outputs),
// and optionally with respect to its input.
void mlp_jacobian(const Mlp& mlp, std::span<const double> params, const Mlp::Tape& tape,
                  Mat& jac_params, Mat* jac_input) {
  const Eigen::Index no = mlp.output_dim();
  jac_params.setZero(no, mlp.num_params());
  if (jac_input != nullptr) jac_input->resize(no, mlp.input_dim());
  Vec g(mlp.num_params());
  Vec gin;
  for (Eigen::Index r = 0; r < no; ++r) {
    g.setZero();
    Vec up = Vec::Zero(no);
    up[r] = 1.0;
    mlp.backward(params, tape, up, {g.data(), static_cast<std::size_t>(g.size())},
                 jac_input != nullptr ? &gin : nullptr);
    jac_params.row(r) = g.transpose();
    if (jac_input != nullptr) jac_input->row(r) = gin.transpose();
  }
}

// Natural parameters of N(m, L L^T) with L unpacked from `raw` (softplus
// diagonal), plus the Jacobian with respect to (m, raw).
struct MeanCholNatural {
  Vec eta1;
  Mat eta2;
  Mat jac;  // K x (d + packed)
};

MeanCholNatural mean_chol_natural(const double* mean, const double* raw, Eigen::Index d) {
  const Eigen::Index p = trifactor::packed_size(d);
  const Vec m = Eigen::Map<const Vec>(mean, d);
  const Mat L = trifactor::unpack(raw, d, true);
  const Mat lam = spd_inverse(L * L.transpose());
  MeanCholNatural out;
  out.eta1 = lam * m;
  out.eta2 = -0.5 * lam;
  out.jac.resize(natural_size(d), d + p);
  for (Eigen::Index k = 0; k < d; ++k) {
    put_column(out.jac, k, lam.col(k), Mat::Zero(d, d));
  }
  for (Eigen::Index k = 0; k < p; ++k) {
    const Mat dl = trifactor::tangent(raw, d, k, true);
    const Mat ds = dl * L.transpose() + L * dl.transpose();
    const Mat dlam = -lam * ds * lam;
    put_column(out.jac, d + k, dlam * m, -0.5 * dlam);
  }
  return out;
}

// acc = D_oldest, then acc = D_s + M_s acc for newer entries.
Mat horner(const std::deque<JacobianTerm>& window) {
  Mat acc = window.back().direct;
  for (auto it = std::next(window.rbegin()); it != window.rend(); ++it) {
    acc = it->direct + it->transition * acc;
  }
  return acc;
}

void push_window(std::deque<JacobianTerm>& window, JacobianTerm term, int truncation) {
  window.push_front(std::move(term));
  while (static_cast<int>(window.size()) > truncation) window.pop_back();
}

// eta1(x) = C x, eta2 = -1/2 A^T Q^{-1} A: the natural increment that makes
// x_{t-1} -> N(x_t; A x_{t-1}, Q) conjugate to q_{t-1}.
class LinearGaussianPotential final : public Potential {
 public:
  LinearGaussianPotential(const Mat& a, const Mat& lq, const double* lq_raw, ParamBlock block,
                          Eigen::Index a_off, Eigen::Index lq_off)
      : a_(a), lq_(lq), lq_raw_(lq_raw, lq_raw + trifactor::packed_size(a.rows())),
        a_off_(a_off), lq_off_(lq_off) {
    qi_ = spd_inverse(lq * lq.transpose());
    c_ = a_.transpose() * qi_;
    eta2_ = symmetrize(-0.5 * a_.transpose() * qi_ * a_);
    block_ = block;
  }

  Vec eta1(const Vec& x_t) const override { return c_ * x_t; }
  RowMat eta1_rows(const RowMat& xs) const override { return xs * c_.transpose(); }
  bool is_linear() const override { return true; }
  Mat linear() const override { return c_; }
  Vec offset() const override { return Vec::Zero(dim()); }

  void vjp_rows(const RowMat& xs, const RowMat& upstream, RowMat& grads) const override {
    const Eigen::Index d = dim();
    const Eigen::Index p = trifactor::packed_size(d);
    const Mat qia = qi_ * a_;
    Vec graw(p);
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      const Vec x = xs.row(i).transpose();
      const Vec u1 = upstream.row(i).head(d).transpose();
      const ConstRowMap u2(upstream.row(i).data() + d, d, d);
      const Mat u2s = u2 + u2.transpose();
      const Mat ga = (qi_ * x) * u1.transpose() - 0.5 * qia * u2s;
      const Mat gqi = a_ * u1 * x.transpose() - 0.5 * a_ * Mat(u2) * a_.transpose();
      const Mat gq = -qi_ * gqi * qi_;
      const Mat gl = (gq + gq.transpose()) * lq_;
      double* row = grads.row(i).data();
      for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index c = 0; c < d; ++c) row[a_off_ + r * d + c] += ga(r, c);
      }
      graw.setZero();
      trifactor::pullback(gl, lq_raw_.data(), d, true, graw.data());
      for (Eigen::Index k = 0; k < p; ++k) row[lq_off_ + k] += graw[k];
    }
  }

 private:
  Mat a_, lq_, qi_, c_;
  std::vector<double> lq_raw_;
  Eigen::Index a_off_, lq_off_;
};

// eta1(x) = MLP(x), eta2 = -L L^T - jitter I with a free lower-triangular L.
class MlpPotential final : public Potential {
 public:
  MlpPotential(const Mlp& mlp, std::span<const double> mlp_params, const double* factor_raw,
               double jitter, ParamBlock block, Eigen::Index mlp_off, Eigen::Index factor_off)
      : mlp_(mlp), params_(mlp_params.begin(), mlp_params.end()), mlp_off_(mlp_off),
        factor_off_(factor_off) {
    const Eigen::Index d = mlp.output_dim();
    factor_ = trifactor::unpack(factor_raw, d, false);
    eta2_ = -factor_ * factor_.transpose() - jitter * Mat::Identity(d, d);
    block_ = block;
  }

  Vec eta1(const Vec& x_t) const override { return mlp_.forward(params_, x_t); }
  RowMat eta1_rows(const RowMat& xs) const override { return mlp_.forward_rows(params_, xs); }

  void vjp_rows(const RowMat& xs, const RowMat& upstream, RowMat& grads) const override {
    const Eigen::Index d = dim();
    const Eigen::Index p = trifactor::packed_size(d);
    Mlp::Tape tape;
    Vec graw(p);
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      mlp_.forward(params_, xs.row(i).transpose(), tape);
      double* row = grads.row(i).data();
      mlp_.backward(params_, tape, upstream.row(i).head(d).transpose(),
                    {row + mlp_off_, static_cast<std::size_t>(mlp_.num_params())});
      const ConstRowMap u2(upstream.row(i).data() + d, d, d);
      const Mat gl = -(u2 + u2.transpose()) * factor_;
      graw.setZero();
      trifactor::pullback(gl, nullptr, d, false, graw.data());
      for (Eigen::Index k = 0; k < p; ++k) row[factor_off_ + k] += graw[k];
    }
  }

 private:
  const Mlp& mlp_;
  std::vector<double> params_;
  Mat factor_;
  Eigen::Index mlp_off_, factor_off_;
};

}  // namespace

// ---------------------------------------------------------------- config

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kConjugate: return "conjugate";
    case Scheme::kAmortized: return "amortized";
    case Scheme::kNonAmortized: return "non_amortized";
  }
  return "conjugate";
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "conjugate" || name == "lgssm_closed_form") return Scheme::kConjugate;
  if (name == "amortized") return Scheme::kAmortized;
  if (name == "non_amortized") return Scheme::kNonAmortized;
  throw ParameterError("unknown variational scheme '" + name + "'");
}

nlohmann::json FamilyConfig::to_json() const {
  return {{"scheme", scheme_name(scheme)},
          {"dim_x", dim_x},
          {"dim_y", dim_y},
          {"truncation", truncation},
          {"obs_hidden", obs_hidden},
          {"carrier_dim", carrier_dim},
          {"carrier_hidden", carrier_hidden},
          {"marginal_hidden", marginal_hidden},
          {"potential_hidden", potential_hidden},
          {"slot_potential_hidden", slot_potential_hidden},
          {"potential_jitter", potential_jitter},
          {"init_transition_gain", init_transition_gain},
          {"init_transition_std", init_transition_std},
          {"init_obs_std", init_obs_std}};
}

FamilyConfig FamilyConfig::from_json(const nlohmann::json& j) {
  FamilyConfig c;
  const std::string name = j.value("scheme", std::string("conjugate"));
  c.scheme = scheme_from_name(name);
  c.dim_x = j.value("dim_x", c.dim_x);
  c.dim_y = j.value("dim_y", c.dim_y);
  c.truncation = j.value("truncation", c.truncation);
  c.obs_hidden = j.value("obs_hidden", c.obs_hidden);
  c.carrier_dim = j.value("carrier_dim", c.carrier_dim);
  c.carrier_hidden = j.value("carrier_hidden", c.carrier_hidden);
  c.marginal_hidden = j.value("marginal_hidden", c.marginal_hidden);
  c.potential_hidden = j.value("potential_hidden", c.potential_hidden);
  c.slot_potential_hidden = j.value("slot_potential_hidden", c.slot_potential_hidden);
  c.potential_jitter = j.value("potential_jitter", c.potential_jitter);
  c.init_transition_gain = j.value("init_transition_gain", c.init_transition_gain);
  c.init_transition_std = j.value("init_transition_std", c.init_transition_std);
  c.init_obs_std = j.value("init_obs_std", c.init_obs_std);
  // The closed-form LGSSM family is the conjugate one with a linear increment map.
  if (name == "lgssm_closed_form") c.obs_hidden.clear();
  require(c.dim_x >= 1 && c.dim_y >= 1, "family dimensions must be positive");
  require(c.truncation >= 1, "truncation must be at least 1");
  require(c.potential_jitter >= 0.0, "potential_jitter must be non-negative");
  require(std::isfinite(c.init_transition_gain), "init_transition_gain must be finite");
  require(c.init_transition_std > 0.0, "init_transition_std must be positive");
  require(c.init_obs_std >= 0.0, "init_obs_std must be non-negative");
  return c;
}

// ---------------------------------------------------------------- layout

ParamBlock ParamLayout::add(const std::string& name, Eigen::Index size) {
  require(!contains(name), "duplicate parameter block " + name);
  ParamBlock b{size_, size};
  entries_.push_back({name, b});
  size_ += size;
  return b;
}

const ParamBlock& ParamLayout::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.block;
  }
  throw ParameterError("no parameter block named " + name);
}

bool ParamLayout::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

nlohmann::json ParamLayout::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries_) {
    arr.push_back({{"name", e.name}, {"offset", e.block.offset}, {"size", e.block.size}});
  }
  return arr;
}

// ---------------------------------------------------------------- trifactor

namespace trifactor {

Eigen::Index packed_size(Eigen::Index d) { return d * (d + 1) / 2; }

Mat unpack(const double* raw, Eigen::Index d, bool softplus_diag) {
  Mat l = Mat::Zero(d, d);
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c <= r; ++c, ++k) {
      l(r, c) = (r == c && softplus_diag) ? softplus(raw[k]) : raw[k];
    }
  }
  return l;
}

Mat tangent(const double* raw, Eigen::Index d, Eigen::Index k, bool softplus_diag) {
  Mat t = Mat::Zero(d, d);
  Eigen::Index idx = 0;
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c <= r; ++c, ++idx) {
      if (idx == k) {
        t(r, c) = (r == c && softplus_diag) ? sigmoid(raw[k]) : 1.0;
        return t;
      }
    }
  }
  throw ParameterError("trifactor::tangent: index out of range");
}

void pack(const Mat& lower, double* raw, bool softplus_diag) {
  const Eigen::Index d = lower.rows();
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c <= r; ++c, ++k) {
      if (r == c && softplus_diag) {
        require(lower(r, r) > 0.0, "trifactor::pack: diagonal must be positive");
        raw[k] = softplus_inverse(lower(r, r));
      } else {
        raw[k] = lower(r, c);
      }
    }
  }
}

void pullback(const Mat& grad_lower, const double* raw, Eigen::Index d, bool softplus_diag,
              double* grad_raw) {
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c <= r; ++c, ++k) {
      const double s = (r == c && softplus_diag) ? sigmoid(raw[k]) : 1.0;
      grad_raw[k] += grad_lower(r, c) * s;
    }
  }
}

}  // namespace trifactor

// ---------------------------------------------------------------- base classes

RowMat Potential::eta1_rows(const RowMat& xs) const {
  RowMat out(xs.rows(), dim());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) out.row(i) = eta1(xs.row(i).transpose()).transpose();
  return out;
}

double Potential::log_value(const Vec& x_prev, const Vec& x_t) const {
  return eta1(x_t).dot(x_prev) + x_prev.dot(eta2_ * x_prev);
}

void VariationalFamily::ensure_capacity(Vec& lambda, int /*t*/) const {
  require_dim(lambda.size(), layout_.size(), "variational parameters");
}

NaturalGaussian VariationalFamily::backward_kernel(const NaturalGaussian& q_prev,
                                                   const Potential& pot, const Vec& x_t) {
  return add_natural(q_prev, pot.increment(x_t));
}

// ---------------------------------------------------------------- conjugate

ConjugateFamily::ConjugateFamily(FamilyConfig config) : VariationalFamily(std::move(config)) {
  const Eigen::Index d = config_.dim_x;
  const Eigen::Index p = trifactor::packed_size(d);
  obs_map_ = Mlp(dims_of(config_.dim_y, config_.obs_hidden, d));
  layout_.add("prior_mean", d);
  layout_.add("prior_chol", p);
  layout_.add("transition_matrix", d * d);
  layout_.add("transition_chol", p);
  layout_.add("obs_map", obs_map_.num_params());
  layout_.add("obs_precision_factor", d * d);
}

Mat ConjugateFamily::transition_matrix(const Vec& lambda) const {
  const Eigen::Index d = dim();
  return ConstRowMap(lambda.data() + layout_.at("transition_matrix").offset, d, d);
}

Mat ConjugateFamily::transition_cov(const Vec& lambda) const {
  const Mat l = trifactor::unpack(lambda.data() + layout_.at("transition_chol").offset, dim(), true);
  return l * l.transpose();
}

Vec ConjugateFamily::initial_parameters(Stream& rng, int /*horizon*/) const {
  const Eigen::Index d = dim();
  Vec lambda = Vec::Zero(layout_.size());
  trifactor::pack(Mat::Identity(d, d), lambda.data() + layout_.at("prior_chol").offset, true);
  Eigen::Map<RowMat>(lambda.data() + layout_.at("transition_matrix").offset, d, d) =
      config_.init_transition_gain * Mat::Identity(d, d);
  trifactor::pack(config_.init_transition_std * Mat::Identity(d, d),
                  lambda.data() + layout_.at("transition_chol").offset, true);
  const ParamBlock ob = layout_.at("obs_map");
  obs_map_.initialize({lambda.data() + ob.offset, static_cast<std::size_t>(ob.size)}, rng);
  double prec_factor = 1.0;
  if (config_.init_obs_std > 0.0) {
    require(config_.dim_y == d && linear_observation_map(),
            "init_obs_std needs a linear increment map and dim_y == dim_x");
    prec_factor = 1.0 / config_.init_obs_std;
    lambda.segment(ob.offset, ob.size).setZero();
    Eigen::Map<RowMat>(lambda.data() + ob.offset, d, d) =
        prec_factor * prec_factor * Mat::Identity(d, d);
  }
  Eigen::Map<RowMat>(lambda.data() + layout_.at("obs_precision_factor").offset, d, d) =
      prec_factor * Mat::Identity(d, d);
  return lambda;
}

Vec ConjugateFamily::exact_parameters(const LgssmParams& model) const {
  model.validate();
  require(linear_observation_map(), "exact parameters need a linear observation map");
  const Eigen::Index d = dim();
  require_dim(model.dim_x(), d, "exact_parameters: state dimension");
  require_dim(model.dim_y(), config_.dim_y, "exact_parameters: observation dimension");
  Vec lambda = Vec::Zero(layout_.size());
  lambda.segment(layout_.at("prior_mean").offset, d) = model.mu0;
  trifactor::pack(Eigen::LLT<Mat>(model.Q0).matrixL(),
                  lambda.data() + layout_.at("prior_chol").offset, true);
  Eigen::Map<RowMat>(lambda.data() + layout_.at("transition_matrix").offset, d, d) = model.A;
  trifactor::pack(Eigen::LLT<Mat>(model.Q).matrixL(),
                  lambda.data() + layout_.at("transition_chol").offset, true);
  const Mat ri = spd_inverse(model.R);
  const Mat w = model.B.transpose() * ri;
  const ParamBlock ob = layout_.at("obs_map");
  Eigen::Map<RowMat>(lambda.data() + ob.offset, d, config_.dim_y) = w;
  Eigen::Map<RowMat>(lambda.data() + layout_.at("obs_precision_factor").offset, d, d) =
      psd_sqrt(model.B.transpose() * ri * model.B);
  return lambda;
}

StepOutput ConjugateFamily::step(const Vec& lambda, const FamilyState* prev, const Vec& y,
                                 int t) const {
  require_dim(lambda.size(), layout_.size(), "conjugate family parameters");
  require_dim(y.size(), config_.dim_y, "observation");
  require((prev == nullptr) == (t == 0), "conjugate step: previous state required for t >= 1");
  const Eigen::Index d = dim();
  const Eigen::Index K = natural_size(d);
  const Eigen::Index P = layout_.size();
  const Eigen::Index p = trifactor::packed_size(d);

  // Observation increment: (MLP(y), -1/2 LR LR^T).
  const ParamBlock ob = layout_.at("obs_map");
  Mlp::Tape tape;
  const Vec obs1 = obs_map_.forward(slice(lambda, ob), y, tape);
  const ParamBlock lrb = layout_.at("obs_precision_factor");
  const Mat lr = ConstRowMap(lambda.data() + lrb.offset, d, d);
  const Mat obs2 = -0.5 * lr * lr.transpose();

  Mat d_obs = Mat::Zero(K, P);
  {
    Mat jp;
    mlp_jacobian(obs_map_, slice(lambda, ob), tape, jp, nullptr);
    d_obs.block(0, ob.offset, d, ob.size) = jp;
    for (Eigen::Index a = 0; a < d; ++a) {
      for (Eigen::Index b = 0; b < d; ++b) {
        const Mat e = unit(d, a, b);
        put_column(d_obs, lrb.offset + a * d + b, Vec::Zero(d),
                   -0.5 * (e * lr.transpose() + lr * e.transpose()));
      }
    }
  }

  StepOutput out;
  out.block = {0, P};
  out.state.t = t;
  Vec eta1;
  Mat eta2;

  if (t == 0) {
    const ParamBlock mb = layout_.at("prior_mean");
    const ParamBlock cb = layout_.at("prior_chol");
    const MeanCholNatural prior =
        mean_chol_natural(lambda.data() + mb.offset, lambda.data() + cb.offset, d);
    Mat d_prior = Mat::Zero(K, P);
    d_prior.block(0, mb.offset, K, d) = prior.jac.leftCols(d);
    d_prior.block(0, cb.offset, K, p) = prior.jac.rightCols(p);
    push_window(out.state.window, {d_prior, Mat()}, config_.truncation);
    push_window(out.state.window, {d_obs, Mat::Identity(K, K)}, config_.truncation);
    eta1 = prior.eta1 + obs1;
    eta2 = prior.eta2 + obs2;
  } else {
    const Vec& carried = prev->carrier;
    const Vec e1 = carried.head(d);
    const Mat e2 = symmetrize(unflat_eta2(carried, d));
    const Mat pm = spd_inverse(-2.0 * e2);
    const Vec m = pm * e1;
    const Mat a = transition_matrix(lambda);
    const ParamBlock qb = layout_.at("transition_chol");
    const double* lq_raw = lambda.data() + qb.offset;
    const Mat lq = trifactor::unpack(lq_raw, d, true);
    const Mat pn = symmetrize(a * pm * a.transpose() + lq * lq.transpose());
    const Mat ln = spd_inverse(pn);
    const Vec mn = a * m;

    // (dP', dm') -> d eta'.
    auto emit = [&](Mat& jac, Eigen::Index col, const Mat& dpn, const Vec& dmn) {
      const Mat dln = -ln * dpn * ln;
      put_column(jac, col, dln * mn + ln * dmn, -0.5 * dln);
    };

    Mat trans(K, K);
    for (Eigen::Index k = 0; k < d; ++k) {
      emit(trans, k, Mat::Zero(d, d), a * pm.col(k));
    }
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) {
        // eta2 enters through its symmetric part.
        const Mat dlam = -(unit(d, r, c) + unit(d, c, r));
        const Mat dp = -pm * dlam * pm;
        emit(trans, d + r * d + c, a * dp * a.transpose(), a * (dp * e1));
      }
    }

    Mat direct = d_obs;
    const ParamBlock ab = layout_.at("transition_matrix");
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) {
        const Mat e = unit(d, r, c);
        emit(direct, ab.offset + r * d + c, e * pm * a.transpose() + a * pm * e.transpose(),
             e * m);
      }
    }
    for (Eigen::Index k = 0; k < p; ++k) {
      const Mat dl = trifactor::tangent(lq_raw, d, k, true);
      emit(direct, qb.offset + k, dl * lq.transpose() + lq * dl.transpose(), Vec::Zero(d));
    }

    out.state.window = prev->window;
    push_window(out.state.window, {std::move(direct), std::move(trans)}, config_.truncation);
    eta1 = ln * mn + obs1;
    eta2 = -0.5 * ln + obs2;
  }

  out.q = NaturalGaussian(eta1, eta2);
  out.state.carrier = out.q.flat();
  out.q_jacobian = horner(out.state.window);
  return out;
}

std::unique_ptr<Potential> ConjugateFamily::potential(const Vec& lambda, int t) const {
  require(t >= 1, "potentials are defined for t >= 1");
  require_dim(lambda.size(), layout_.size(), "conjugate family parameters");
  const ParamBlock ab = layout_.at("transition_matrix");
  const ParamBlock qb = layout_.at("transition_chol");
  const double* lq_raw = lambda.data() + qb.offset;
  return std::make_unique<LinearGaussianPotential>(
      transition_matrix(lambda), trifactor::unpack(lq_raw, dim(), true), lq_raw,
      ParamBlock{0, layout_.size()}, ab.offset, qb.offset);
}

// ---------------------------------------------------------------- amortized

AmortizedFamily::AmortizedFamily(FamilyConfig config) : VariationalFamily(std::move(config)) {
  const Eigen::Index d = config_.dim_x;
  const Eigen::Index p = trifactor::packed_size(d);
  carrier_dim_ = config_.carrier_dim > 0 ? config_.carrier_dim : 2 * d;
  carrier_map_ = Mlp(dims_of(carrier_dim_ + config_.dim_y, config_.carrier_hidden, carrier_dim_),
                     Activation::kTanh);
  marginal_map_ = Mlp(dims_of(carrier_dim_, config_.marginal_hidden, d + p));
  potential_map_ = Mlp(dims_of(d, config_.potential_hidden, d));
  layout_.add("carrier_init", carrier_dim_);
  layout_.add("carrier_map", carrier_map_.num_params());
  layout_.add("marginal_map", marginal_map_.num_params());
  layout_.add("potential_map", potential_map_.num_params());
  layout_.add("potential_factor", p);
}

Vec AmortizedFamily::initial_parameters(Stream& rng, int /*horizon*/) const {
  const Eigen::Index d = dim();
  Vec lambda = Vec::Zero(layout_.size());
  auto init = [&](const Mlp& mlp, const char* name) {
    const ParamBlock b = layout_.at(name);
    mlp.initialize({lambda.data() + b.offset, static_cast<std::size_t>(b.size)}, rng);
  };
  init(carrier_map_, "carrier_map");
  init(marginal_map_, "marginal_map");
  init(potential_map_, "potential_map");
  // A zero factor is a stationary point of its gradient, so start away from it.
  trifactor::pack(0.5 * Mat::Identity(d, d), lambda.data() + layout_.at("potential_factor").offset,
                  false);
  return lambda;
}

StepOutput AmortizedFamily::step(const Vec& lambda, const FamilyState* prev, const Vec& y,
                                 int t) const {
  require_dim(lambda.size(), layout_.size(), "amortized family parameters");
  require_dim(y.size(), config_.dim_y, "observation");
  require((prev == nullptr) == (t == 0), "amortized step: previous state required for t >= 1");
  const Eigen::Index d = dim();
  const Eigen::Index da = carrier_dim_;
  const Eigen::Index P = layout_.size();
  const ParamBlock ib = layout_.at("carrier_init");
  const ParamBlock cb = layout_.at("carrier_map");
  const ParamBlock mb = layout_.at("marginal_map");

  StepOutput out;
  out.block = {0, P};
  out.state.t = t;

  Vec a_prev;
  if (t == 0) {
    a_prev = lambda.segment(ib.offset, da);
    Mat sel = Mat::Zero(da, P);
    sel.block(0, ib.offset, da, da).setIdentity();
    push_window(out.state.window, {std::move(sel), Mat()}, config_.truncation);
  } else {
    a_prev = prev->carrier;
    out.state.window = prev->window;
  }

  Vec input(da + config_.dim_y);
  input << a_prev, y;
  Mlp::Tape tape;
  const Vec a = carrier_map_.forward(slice(lambda, cb), input, tape);
  Mat jp, jin;
  mlp_jacobian(carrier_map_, slice(lambda, cb), tape, jp, &jin);
  Mat direct = Mat::Zero(da, P);
  direct.block(0, cb.offset, da, cb.size) = jp;
  push_window(out.state.window, {std::move(direct), jin.leftCols(da)}, config_.truncation);
  out.state.carrier = a;
  const Mat ja = horner(out.state.window);

  const Vec head = marginal_map_.forward(slice(lambda, mb), a, tape);
  Mat hp, ha;
  mlp_jacobian(marginal_map_, slice(lambda, mb), tape, hp, &ha);
  const MeanCholNatural nat = mean_chol_natural(head.data(), head.data() + d, d);
  Mat jhead = ha * ja;
  jhead.middleCols(mb.offset, mb.size) += hp;
  out.q_jacobian = nat.jac * jhead;
  out.q = NaturalGaussian(nat.eta1, nat.eta2);
  return out;
}

std::unique_ptr<Potential> AmortizedFamily::potential(const Vec& lambda, int t) const {
  require(t >= 1, "potentials are defined for t >= 1");
  require_dim(lambda.size(), layout_.size(), "amortized family parameters");
  const ParamBlock pb = layout_.at("potential_map");
  const ParamBlock fb = layout_.at("potential_factor");
  return std::make_unique<MlpPotential>(potential_map_, slice(lambda, pb),
                                        lambda.data() + fb.offset, config_.potential_jitter,
                                        ParamBlock{0, layout_.size()}, pb.offset, fb.offset);
}

Vec AmortizedFamily::unrolled_eta(const Vec& lambda, const Vec& carrier_before,
                                  const std::vector<Vec>& ys) const {
  const Eigen::Index d = dim();
  const ParamBlock cb = layout_.at("carrier_map");
  const ParamBlock mb = layout_.at("marginal_map");
  Vec a = carrier_before;
  for (const auto& y : ys) {
    Vec input(carrier_dim_ + config_.dim_y);
    input << a, y;
    a = carrier_map_.forward(slice(lambda, cb), input);
  }
  const Vec head = marginal_map_.forward(slice(lambda, mb), a);
  const MeanCholNatural nat = mean_chol_natural(head.data(), head.data() + d, d);
  return flatten_natural(nat.eta1, symmetrize(nat.eta2));
}

// ---------------------------------------------------------------- non-amortized

NonAmortizedFamily::NonAmortizedFamily(FamilyConfig config) : VariationalFamily(std::move(config)) {
  const Eigen::Index d = config_.dim_x;
  const Eigen::Index p = trifactor::packed_size(d);
  potential_map_ = Mlp(dims_of(d, config_.slot_potential_hidden, d));
  layout_.add("mean", d);
  layout_.add("chol", p);
  layout_.add("potential_map", potential_map_.num_params());
  layout_.add("potential_factor", p);
}

ParamBlock NonAmortizedFamily::slot(int t) const {
  require(t >= 0, "slot index must be non-negative");
  return {static_cast<Eigen::Index>(t) * slot_size(), slot_size()};
}

Eigen::Index NonAmortizedFamily::num_params(int horizon) const {
  return static_cast<Eigen::Index>(std::max(horizon, 0) + 1) * slot_size();
}

Vec NonAmortizedFamily::initial_parameters(Stream& rng, int horizon) const {
  const Eigen::Index d = dim();
  Vec first = Vec::Zero(slot_size());
  trifactor::pack(Mat::Identity(d, d), first.data() + layout_.at("chol").offset, true);
  const ParamBlock pb = layout_.at("potential_map");
  potential_map_.initialize({first.data() + pb.offset, static_cast<std::size_t>(pb.size)}, rng);
  trifactor::pack(0.5 * Mat::Identity(d, d), first.data() + layout_.at("potential_factor").offset,
                  false);
  Vec lambda(num_params(horizon));
  for (Eigen::Index s = 0; s * slot_size() < lambda.size(); ++s) {
    lambda.segment(s * slot_size(), slot_size()) = first;
  }
  return lambda;
}

void NonAmortizedFamily::ensure_capacity(Vec& lambda, int t) const {
  require(lambda.size() % slot_size() == 0 && lambda.size() > 0,
          "non-amortized parameters must hold whole slots");
  const Eigen::Index have = lambda.size() / slot_size();
  const Eigen::Index want = static_cast<Eigen::Index>(t) + 1;
  if (have >= want) return;
  Vec grown(want * slot_size());
  grown.head(lambda.size()) = lambda;
  // New slots start from the latest one.
  for (Eigen::Index s = have; s < want; ++s) {
    grown.segment(s * slot_size(), slot_size()) = lambda.tail(slot_size());
  }
  lambda = std::move(grown);
}

StepOutput NonAmortizedFamily::step(const Vec& lambda, const FamilyState* prev, const Vec& /*y*/,
                                    int t) const {
  require((prev == nullptr) == (t == 0), "non-amortized step: previous state required for t >= 1");
  const ParamBlock sb = slot(t);
  require(lambda.size() >= sb.offset + sb.size, "non-amortized parameters: slot not allocated");
  const Eigen::Index d = dim();
  const Eigen::Index p = trifactor::packed_size(d);
  const double* base = lambda.data() + sb.offset;
  const MeanCholNatural nat =
      mean_chol_natural(base + layout_.at("mean").offset, base + layout_.at("chol").offset, d);
  StepOutput out;
  out.block = sb;
  out.state.t = t;
  out.q_jacobian = Mat::Zero(natural_size(d), sb.size);
  out.q_jacobian.middleCols(layout_.at("mean").offset, d) = nat.jac.leftCols(d);
  out.q_jacobian.middleCols(layout_.at("chol").offset, p) = nat.jac.rightCols(p);
  out.q = NaturalGaussian(nat.eta1, nat.eta2);
  return out;
}

std::unique_ptr<Potential> NonAmortizedFamily::potential(const Vec& lambda, int t) const {
  require(t >= 1, "potentials are defined for t >= 1");
  const ParamBlock sb = slot(t);
  require(lambda.size() >= sb.offset + sb.size, "non-amortized parameters: slot not allocated");
  const ParamBlock pb = layout_.at("potential_map");
  const ParamBlock fb = layout_.at("potential_factor");
  return std::make_unique<MlpPotential>(
      potential_map_,
      std::span<const double>(lambda.data() + sb.offset + pb.offset,
                              static_cast<std::size_t>(pb.size)),
      lambda.data() + sb.offset + fb.offset, config_.potential_jitter, sb, pb.offset, fb.offset);
}

// ---------------------------------------------------------------- helpers

std::unique_ptr<VariationalFamily> make_family(const FamilyConfig& config) {
  require(config.truncation >= 1, "truncation must be at least 1");
  switch (config.scheme) {
    case Scheme::kConjugate: return std::make_unique<ConjugateFamily>(config);
    case Scheme::kAmortized: return std::make_unique<AmortizedFamily>(config);
    case Scheme::kNonAmortized: return std::make_unique<NonAmortizedFamily>(config);
  }
  throw ParameterError("unknown scheme");
}

FilterPass run_filter(const VariationalFamily& family, const Vec& lambda, const RowMat& ys) {
  FilterPass pass;
  const int T = static_cast<int>(ys.rows()) - 1;
  require(T >= 0, "run_filter: empty observation sequence");
  pass.potentials.resize(static_cast<std::size_t>(T) + 1);
  FamilyState state;
  for (int t = 0; t <= T; ++t) {
    StepOutput so = family.step(lambda, t == 0 ? nullptr : &state, ys.row(t).transpose(), t);
    pass.marginals.push_back(std::move(so.q));
    // Jacobians are not needed here; keep the carried window short.
    state = std::move(so.state);
    state.window.clear();
    if (t >= 1) pass.potentials[static_cast<std::size_t>(t)] = family.potential(lambda, t);
  }
  return pass;
}

RowMat filtering_means(const FilterPass& pass) {
  const auto n = static_cast<Eigen::Index>(pass.marginals.size());
  RowMat out(n, pass.marginals.front().dim());
  for (Eigen::Index t = 0; t < n; ++t) out.row(t) = pass.marginals[t].mean().transpose();
  return out;
}

RowMat smoothing_means(const FilterPass& pass, int paths, std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(pass.marginals.size());
  const Eigen::Index d = pass.marginals.front().dim();
  RowMat out(n, d);
  const bool linear = std::all_of(pass.potentials.begin() + 1, pass.potentials.end(),
                                  [](const auto& p) { return p->is_linear(); });
  if (linear) {
    // X_{t-1} | x_t is Gaussian with mean affine in x_t, so means propagate exactly.
    Vec m = pass.marginals.back().mean();
    out.row(n - 1) = m.transpose();
    for (Eigen::Index t = n - 1; t >= 1; --t) {
      const auto& q = pass.marginals[static_cast<std::size_t>(t - 1)];
      const Potential& pot = *pass.potentials[static_cast<std::size_t>(t)];
      const Mat lam = -2.0 * (q.eta2() + pot.eta2());
      Eigen::LLT<Mat> llt(symmetrize(lam));
      if (llt.info() != Eigen::Success) throw DegenerateKernelError("kernel degenerate");
      m = llt.solve(q.eta1() + pot.linear() * m + pot.offset());
      out.row(t - 1) = m.transpose();
    }
    return out;
  }
  require(paths >= 1, "smoothing_means: need at least one path");
  out.setZero();
  for (int k = 0; k < paths; ++k) {
    Stream rng(seed, Purpose::kBackward, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(k));
    Vec x = pass.marginals.back().sample(rng);
    out.row(n - 1) += x.transpose();
    for (Eigen::Index t = n - 1; t >= 1; --t) {
      const NaturalGaussian kern = VariationalFamily::backward_kernel(
          pass.marginals[static_cast<std::size_t>(t - 1)], *pass.potentials[static_cast<std::size_t>(t)], x);
      x = kern.sample(rng);
      out.row(t - 1) += x.transpose();
    }
  }
  out /= static_cast<double>(paths);
  return out;
}

}  // namespace seqvar
