// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--out-dir DIR] [--only 1,4,9]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "seqvar/elbo.hpp"
#include "seqvar/harness.hpp"
#include "seqvar/oracle.hpp"

using namespace seqvar;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_out = "acceptance_runs";

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string summary_value(const RunResult& r, const std::string& key) {
  for (const auto& [k, v] : r.summary)
    if (k == key) return v;
  throw std::runtime_error("summary has no " + key);
}
double summary_num(const RunResult& r, const std::string& key) { return std::stod(summary_value(r, key)); }

ExperimentConfig load(const std::string& name) {
  return ExperimentConfig::load(std::string(SEQVAR_SOURCE_DIR) + "/configs/" + name);
}

Vec perturbed(const Vec& lambda, double scale, std::uint64_t seed) {
  Stream s(seed, Purpose::kTest);
  Vec out = lambda;
  for (Eigen::Index k = 0; k < out.size(); ++k) out[k] += scale * s.normal();
  return out;
}

// Conjugate family on a random d=2 LGSSM with data and a lambda near the exact one.
struct Lgssm {
  LgssmParams p;
  std::unique_ptr<LgssmModel> model;
  Trajectory traj;
  std::unique_ptr<VariationalFamily> fam;
  Vec exact;

  Lgssm(int T, std::uint64_t seed, int truncation = 2) {
    p = random_lgssm(2, 2, seed);
    model = std::make_unique<LgssmModel>(p);
    traj = simulate(*model, T, seed + 1000);
    FamilyConfig c;
    c.dim_x = 2;
    c.dim_y = 2;
    c.truncation = truncation;
    fam = make_family(c);
    exact = conj().exact_parameters(p);
  }
  const ConjugateFamily& conj() const { return dynamic_cast<const ConjugateFamily&>(*fam); }
};

// ---------------------------------------------------------------------------

Outcome oracle_exactness() {
  const int T = 3;
  const LgssmParams p = random_lgssm(2, 2, 3);
  const LgssmModel model(p);
  const Trajectory traj = simulate(model, T, 4);
  const RowMat& ys = traj.observations;
  const auto J = testing::lgssm_joint(p, T);
  const auto smooth = rts_smoother(p, kalman_filter(p, ys));
  Vec y_all((T + 1) * 2);
  for (int t = 0; t <= T; ++t) y_all.segment(2 * t, 2) = ys.row(t).transpose();
  double worst = 0.0;
  for (int t = 0; t <= T; ++t) {
    const auto [m, c] = testing::condition(J.mean, J.cov, testing::range(J.xi(t), 2),
                                           testing::range(J.yi(0), 2 * (T + 1)), y_all);
    worst = std::max({worst, (smooth[t].mean - m).cwiseAbs().maxCoeff(), (smooth[t].cov - c).cwiseAbs().maxCoeff()});
  }
  const ConjugateFamily fam([] {
    FamilyConfig c;
    c.dim_x = 2;
    c.dim_y = 2;
    return c;
  }());
  double gap = 0.0;
  for (std::uint64_t s : {11u, 12u, 13u}) {
    const LgssmParams q = random_lgssm(2, 2, s);
    const Trajectory tr = simulate(LgssmModel(q), 100, s + 1);
    gap = std::max(gap, std::abs(closed_form_elbo(fam, fam.exact_parameters(q), q, tr.observations) -
                                 kalman_log_likelihood(q, tr.observations)));
  }
  return {worst < 1e-8 && gap < 1e-6,
          "smoother vs dense max dev " + fmt("%.2e", worst) + ", |ELBO(exact) - log p(y)| " + fmt("%.2e", gap)};
}

Outcome estimator_consistency() {
  const int T = 50;
  const std::vector<Eigen::Index> Ns{10, 100, 1000};
  std::vector<std::vector<double>> err(Ns.size());
  EstimatorOptions o;
  o.compute_gradient = false;
  for (std::uint64_t s = 1; s <= 20; ++s) {
    Lgssm L(T, s);
    const Vec lambda = perturbed(L.exact, 0.1, s + 2000);
    const double want = closed_form_elbo(L.conj(), lambda, L.p, L.traj.observations) / T;
    for (std::size_t k = 0; k < Ns.size(); ++k) {
      const double got =
          estimate_sequence(*L.fam, lambda, *L.model, L.traj.observations, {Ns[k], 0, 7000 + s}, o).elbo / T;
      err[k].push_back(std::abs(got - want) / std::abs(want));
    }
  }
  const double m10 = median(err[0]), m100 = median(err[1]), m1000 = median(err[2]);
  const double worst1000 = *std::max_element(err[2].begin(), err[2].end());
  return {worst1000 < 0.02 && m10 > m100 && m100 > m1000,
          "median rel err N=10/100/1000: " + fmt("%.4f", m10) + " / " + fmt("%.4f", m100) + " / " +
              fmt("%.5f", m1000) + ", worst at N=1000 " + fmt("%.5f", worst1000)};
}

Outcome gradient_fidelity() {
  // Untruncated family: the closed-form gradient differentiates through every carrier.
  const int T = 20;
  Lgssm L(T, 31, T + 2);
  double worst = 1.0;
  std::string cosines;
  for (int r = 0; r < 5; ++r) {
    const Vec lambda = perturbed(L.exact, 0.3, 4000 + r);
    const auto [val, exact] = closed_form_elbo_and_grad(L.conj(), lambda, L.p, L.traj.observations);
    Vec avg = Vec::Zero(exact.size());
    for (std::uint64_t s = 0; s < 20; ++s) {
      avg += estimate_sequence(*L.fam, lambda, *L.model, L.traj.observations, {500, 0, 5000 + 100 * r + s}).grad;
    }
    const double c = testing::cosine(avg, exact);
    worst = std::min(worst, c);
    cosines += (r ? " " : "") + fmt("%.4f", c);
  }
  return {worst > 0.95, "cosines " + cosines};
}

Outcome optimization_parity() {
  const int seeds = 10;
  int ok = 0;
  std::string gaps;
  double score_s = 0.0, oracle_s = 0.0;
  long score_steps = 0, oracle_steps = 0;
  for (int s = 1; s <= seeds; ++s) {
    ExperimentConfig sc = load("lgssm_parity.json");
    sc.seed = static_cast<std::uint64_t>(s);
    sc.out_dir = (g_out / "parity" / ("score_" + std::to_string(s))).string();
    double t0 = now_s();
    const RunResult score = run_experiment(sc);
    score_s += now_s() - t0;
    score_steps += static_cast<long>(sc.epochs) * (sc.T + 1);

    ExperimentConfig oc = sc;
    oc.mode = Mode::kOracle;
    oc.epochs = 1000;
    oc.out_dir = (g_out / "parity" / ("oracle_" + std::to_string(s))).string();
    t0 = now_s();
    const RunResult oracle = run_experiment(oc);
    oracle_s += now_s() - t0;
    oracle_steps += static_cast<long>(oc.epochs) * (oc.T + 1);

    const double a = summary_num(score, "elbo_final"), b = summary_num(oracle, "elbo_final");
    const double gap = std::abs(a - b) / std::abs(b);
    ok += gap <= 0.05;
    gaps += (s > 1 ? " " : "") + fmt("%.3f", gap);
  }
  const double ratio = (score_s / score_steps) / (oracle_s / oracle_steps);
  return {ok >= 8 && ratio <= 5.0, std::to_string(ok) + "/10 within 5% (gaps " + gaps +
                                        "), step time score/oracle " + fmt("%.2f", ratio)};
}

double slope(const std::vector<double>& n, const std::vector<double>& t) {
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    mx += std::log(n[k]) / n.size();
    my += std::log(t[k]) / n.size();
  }
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    sxy += (std::log(n[k]) - mx) * (std::log(t[k]) - my);
    sxx += (std::log(n[k]) - mx) * (std::log(n[k]) - mx);
  }
  return sxy / sxx;
}

Outcome backward_sampling() {
  Lgssm L(1, 41);
  const Vec lambda = perturbed(L.exact, 0.1, 42);
  const StepOutput q0 = L.fam->step(lambda, nullptr, L.traj.y(0), 0);
  const StepOutput q1 = L.fam->step(lambda, &q0.state, L.traj.y(1), 1);
  const auto pot = L.fam->potential(lambda, 1);
  EstimatorOptions o;
  o.compute_gradient = false;

  // Paired replications: both propagations draw the same new particles.
  const ParticleCloud prev = init_cloud(q0, *L.model, L.traj.y(0), 50, 43, o);
  const int reps = 10000;
  double sum = 0, sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    const auto seed = static_cast<std::uint64_t>(100000 + r);
    const ParticleCloud full = propagate_full(prev, q1, *pot, *L.model, L.traj.y(1), 10, seed, o);
    const ParticleCloud bs = propagate_backward_sampled(prev, q1, *pot, *L.model, L.traj.y(1), 10, 2, seed, o);
    const double d = bs.H.mean() - full.H.mean();
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / (reps - 1));

  // Timing with gradients on, the cost of a training step.
  const std::vector<double> ns{100, 1000, 10000};
  std::vector<double> tf, tb;
  for (double nd : ns) {
    const auto N = static_cast<Eigen::Index>(nd);
    const ParticleCloud c = init_cloud(q0, *L.model, L.traj.y(0), N, 44);
    const int k = N >= 10000 ? 1 : N >= 1000 ? 3 : 30;
    double t0 = now_s();
    for (int r = 0; r < k; ++r) propagate_full(c, q1, *pot, *L.model, L.traj.y(1), N, 45 + r);
    tf.push_back((now_s() - t0) / k);
    const int kb = 3 * k;
    t0 = now_s();
    for (int r = 0; r < kb; ++r) propagate_backward_sampled(c, q1, *pot, *L.model, L.traj.y(1), N, 2, 45 + r);
    tb.push_back((now_s() - t0) / kb);
  }
  const double sf = slope(ns, tf), sb = slope(ns, tb);
  return {std::abs(mean) <= 3 * se && sb < 1.4 && sf > 1.8,
          "mean H diff " + fmt("%.2e", mean) + " (SE " + fmt("%.2e", se) + "), slope backward-sampled " +
              fmt("%.2f", sb) + ", full " + fmt("%.2f", sf)};
}

Outcome variance_reduction() {
  Lgssm L(10, 51);
  const Vec lambda = perturbed(L.exact, 0.1, 52);
  const int reps = 1000;
  auto collect = [&](bool cv, std::uint64_t base) {
    EstimatorOptions o;
    o.control_variate = cv;
    std::vector<Vec> gs;
    for (int r = 0; r < reps; ++r)
      gs.push_back(estimate_sequence(*L.fam, lambda, *L.model, L.traj.observations,
                                     {30, 0, base + static_cast<std::uint64_t>(r)}, o).grad);
    return gs;
  };
  auto stats = [&](const std::vector<Vec>& gs) {
    Vec m = Vec::Zero(gs[0].size()), v = Vec::Zero(gs[0].size());
    for (const auto& g : gs) m += g / reps;
    for (const auto& g : gs) v += (g - m).cwiseAbs2() / (reps - 1);
    return std::make_pair(m, v);
  };
  const auto [m1, v1] = stats(collect(true, 600000));
  const auto [m0, v0] = stats(collect(false, 700000));
  std::vector<double> ratio;
  int off = 0;
  for (Eigen::Index k = 0; k < m1.size(); ++k) {
    ratio.push_back(v1[k] / v0[k]);
    off += std::abs(m1[k] - m0[k]) > 3 * std::sqrt((v1[k] + v0[k]) / reps);
  }
  const double med = median(ratio);
  return {med <= 1.0 && off == 0, "median variance ratio cv/plain " + fmt("%.3f", med) + ", coordinates with " +
                                       "means apart by > 3 SE: " + std::to_string(off) + "/" +
                                       std::to_string(m1.size())};
}

Outcome chaotic_rnn() {
  std::vector<double> smooth, filt;
  int ok = 0;
  for (int s = 1; s <= 10; ++s) {
    ExperimentConfig c = load("rnn_offline.json");
    c.seed = static_cast<std::uint64_t>(s);
    c.out_dir = (g_out / "rnn_offline" / std::to_string(s)).string();
    const RunResult r = run_experiment(c);
    smooth.push_back(summary_num(r, "smoothing_rmse"));
    filt.push_back(summary_num(r, "filtering_rmse"));
    ok += smooth.back() <= 0.20;
  }
  const double ms = median(smooth), mf = median(filt);
  return {ok >= 7 && mf >= ms, std::to_string(ok) + "/10 with smoothing RMSE <= 0.20, median smoothing " +
                                   fmt("%.4f", ms) + ", median filtering " + fmt("%.4f", mf)};
}

Outcome streaming() {
  ExperimentConfig c = load("rnn_online.json");
  c.out_dir = (g_out / "rnn_online").string();
  const RunResult r = run_experiment(c);
  const double train = summary_num(r, "smoothing_rmse"), fresh = summary_num(r, "eval_smoothing_rmse");
  const double rel = std::abs(fresh - train) / train;
  return {rel <= 0.10, "training RMSE " + fmt("%.4f", train) + ", fresh sequences " + fmt("%.4f", fresh) +
                           ", relative difference " + fmt("%.3f", rel)};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Outcome determinism() {
  std::vector<ExperimentConfig> cases;
  {
    ExperimentConfig c = load("lgssm_offline.json");
    c.N = 200;
    c.M = 0;
    c.epochs = 5;
    c.eval_every = 5;
    cases.push_back(c);
    c.M = 2;
    cases.push_back(c);
  }
  {
    ExperimentConfig c = load("rnn_online.json");
    c.T = 300;
    c.eval_T = 100;
    c.eval_sequences = 2;
    cases.push_back(c);
  }
  int same = 0, total = 0;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    std::string ref_m, ref_s;
    // Re-run with one worker, then more workers than blocks.
    for (int w : {1, 1, 4, 16}) {
      ExperimentConfig c = cases[k];
      c.estimator.workers = w;
      c.estimator.block_rows = 32;
      c.out_dir = (g_out / "determinism" / (std::to_string(k) + "_" + std::to_string(total))).string();
      run_experiment(c);
      const std::string m = slurp(fs::path(c.out_dir) / "metrics.jsonl");
      const std::string s = slurp(fs::path(c.out_dir) / "summary.csv");
      if (ref_m.empty()) {
        ref_m = m;
        ref_s = s;
      }
      same += !m.empty() && m == ref_m && s == ref_s;
      ++total;
    }
  }
  return {same == total, std::to_string(same) + "/" + std::to_string(total) +
                             " runs byte-identical to their reference (workers 1, 1, 4, 16)"};
}

Outcome unit_suites() {
  std::stringstream list(SEQVAR_UNIT_TESTS);
  std::string exe;
  int ok = 0, n = 0;
  std::string failed;
  while (std::getline(list, exe, '|')) {
    if (exe.empty()) continue;
    ++n;
    const std::string cmd = "\"" + exe + "\" --minimal > /dev/null 2>&1";
    if (std::system(cmd.c_str()) == 0) {
      ++ok;
    } else {
      failed += " " + fs::path(exe).filename().string();
    }
  }
  return {n > 0 && ok == n, std::to_string(ok) + "/" + std::to_string(n) + " suites pass" +
                                (failed.empty() ? "" : "; failing:" + failed)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  double budget_s;  // 0: none
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out-dir" && i + 1 < argc) {
      g_out = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      std::string tok;
      while (std::getline(s, tok, ',')) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance [--out-dir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(g_out);

  const std::vector<Criterion> all{
      {1, "oracle exactness", oracle_exactness, 1.0},
      {2, "estimator consistency", estimator_consistency, 30.0},
      {3, "gradient fidelity", gradient_fidelity, 60.0},
      {4, "offline optimization parity", optimization_parity, 0.0},
      {5, "backward sampling", backward_sampling, 0.0},
      {6, "variance reduction", variance_reduction, 0.0},
      {7, "chaotic RNN offline", chaotic_rnn, 0.0},
      {8, "streaming generalization", streaming, 0.0},
      {9, "determinism", determinism, 0.0},
      {10, "unit suites", unit_suites, 0.0},
  };

  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const double t0 = now_s();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = now_s() - t0;
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.name << ": " << o.detail << " ("
              << fmt("%.1f", secs) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
