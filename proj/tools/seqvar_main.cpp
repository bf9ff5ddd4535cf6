// seqvar command-line runner.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "seqvar/harness.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<int> ckpt_every;
  std::string resume;
  int replicates = 1;
  bool dry_run = false;
  std::optional<int> workers;
  bool wall_clock = false;
  std::vector<long> bench_ns{100, 1000};
  int bench_reps = 20;
};

void report_error(const char* kind, int code, const std::string& what, const std::string& out_dir) {
  const json rec = {{"error", kind}, {"exit_code", code}, {"message", what}};
  std::cerr << rec.dump() << "\n";
  if (out_dir.empty()) return;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::ofstream f(fs::path(out_dir) / "error.json");
  if (f) f << rec.dump() << "\n";
}

seqvar::ExperimentConfig load_config(const Options& o) {
  seqvar::ExperimentConfig c = seqvar::ExperimentConfig::load(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  if (o.ckpt_every) c.ckpt_every = *o.ckpt_every;
  if (!o.resume.empty()) c.resume = o.resume;
  if (o.workers) c.estimator.workers = *o.workers;
  if (o.wall_clock) c.wall_clock = true;
  if (o.command == "oracle") c.mode = seqvar::Mode::kOracle;
  return c;
}

// Re-launches this executable once per seed, a few at a time, and gathers the summaries.
int run_replicates(const Options& o, const std::vector<std::string>& argv) {
  const seqvar::ExperimentConfig base = load_config(o);
  const std::uint64_t seed0 = base.seed;
  const fs::path root = base.out_dir;
  fs::create_directories(root);

  std::vector<std::string> passthrough;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    if (a == "--replicates" || a == "--seed" || a == "--out-dir") {
      ++i;
      continue;
    }
    if (a.rfind("--replicates=", 0) == 0 || a.rfind("--seed=", 0) == 0 || a.rfind("--out-dir=", 0) == 0) continue;
    passthrough.push_back(a);
  }

  const int slots = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::pair<pid_t, int>> running;
  std::vector<int> codes(static_cast<std::size_t>(o.replicates), kOther);
  auto reap_one = [&]() {
    int status = 0;
    const pid_t pid = wait(&status);
    for (auto it = running.begin(); it != running.end(); ++it) {
      if (it->first == pid) {
        codes[static_cast<std::size_t>(it->second)] = WIFEXITED(status) ? WEXITSTATUS(status) : kOther;
        running.erase(it);
        return;
      }
    }
  };

  for (int r = 0; r < o.replicates; ++r) {
    if (static_cast<int>(running.size()) >= slots) reap_one();
    std::vector<std::string> args{"seqvar"};
    args.insert(args.end(), passthrough.begin(), passthrough.end());
    args.insert(args.end(), {"--seed", std::to_string(seed0 + static_cast<std::uint64_t>(r)), "--out-dir",
                             (root / ("rep_" + std::to_string(r))).string()});
    std::vector<char*> cargs;
    for (auto& a : args) cargs.push_back(a.data());
    cargs.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, cargs.data(), environ) != 0) {
      throw seqvar::IoError("cannot launch replicate " + std::to_string(r));
    }
    running.emplace_back(pid, r);
  }
  while (!running.empty()) reap_one();

  std::ofstream agg(root / "replicates.csv", std::ios::trunc);
  bool header = false;
  int worst = kOk;
  for (int r = 0; r < o.replicates; ++r) {
    worst = std::max(worst, codes[static_cast<std::size_t>(r)]);
    std::ifstream s(root / ("rep_" + std::to_string(r)) / "summary.csv");
    std::string h, v;
    if (!std::getline(s, h) || !std::getline(s, v)) continue;
    if (!header) {
      agg << "replicate," << h << "\n";
      header = true;
    }
    agg << r << "," << v << "\n";
  }
  return worst;
}

int dispatch(const Options& o, const std::vector<std::string>& argv) {
  if (o.replicates > 1 && !o.dry_run && o.command != "bench") return run_replicates(o, argv);
  seqvar::ExperimentConfig cfg = load_config(o);
  cfg.validate();

  if (o.dry_run) {
    // Builds the model and family so that dimension errors surface too.
    const auto model = seqvar::build_model(cfg.model, cfg.seed);
    seqvar::FamilyConfig fc = cfg.family;
    fc.dim_x = model->state_dim();
    fc.dim_y = model->obs_dim();
    const auto family = seqvar::make_family(fc);
    json out = {{"valid", true}, {"config", cfg.to_json()},
                {"parameters", family->num_params(cfg.T)}};
    std::cout << out.dump(2) << "\n";
    return kOk;
  }

  if (o.command == "generate") {
    seqvar::generate_data(cfg);
    std::cout << "wrote " << (fs::path(cfg.out_dir) / "trajectory.csv").string() << "\n";
    return kOk;
  }
  if (o.command == "bench") {
    std::vector<Eigen::Index> ns(o.bench_ns.begin(), o.bench_ns.end());
    const auto rows = seqvar::bench_steps(cfg, ns, o.bench_reps);
    fs::create_directories(cfg.out_dir);
    std::ofstream f(fs::path(cfg.out_dir) / "bench.csv", std::ios::trunc);
    if (!f) throw seqvar::IoError("cannot write bench.csv");
    f << "estimator,N,M,ms_per_step\n";
    for (const auto& r : rows) {
      f << r.estimator << "," << r.N << "," << r.M << "," << r.ms_per_step << "\n";
      std::cout << r.estimator << " N=" << r.N << " M=" << r.M << " " << r.ms_per_step << " ms/step\n";
    }
    return kOk;
  }
  const auto res = seqvar::run_experiment(cfg);
  for (const auto& [k, v] : res.summary) std::cout << k << "=" << v << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive score-based variational smoothing for state-space models"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "experiment config (JSON, \"schema\": 1)")->required();
    sub->add_option("--seed", o.seed, "master seed (overrides the config)");
    sub->add_option("--out-dir", o.out_dir, "output directory (overrides the config)");
    sub->add_option("--ckpt-every", o.ckpt_every, "checkpoint every k epochs or steps");
    sub->add_option("--resume", o.resume, "resume from a checkpoint");
    sub->add_option("--replicates", o.replicates, "run seeds seed..seed+R-1 as separate processes")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--dry-run", o.dry_run, "validate the config and exit");
    sub->add_option("--workers", o.workers, "particle worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--wall-clock", o.wall_clock, "add wall_ms fields to the outputs");
  };
  for (const char* name : {"generate", "train", "oracle"}) {
    add_common(app.add_subcommand(name, std::string(name) == "generate"
                                            ? "simulate a trajectory from the configured model"
                                        : std::string(name) == "train" ? "train in the configured mode"
                                                                      : "closed-form oracle run (LGSSM)"));
  }
  auto* bench = app.add_subcommand("bench", "time one estimator step across particle counts");
  add_common(bench);
  bench->add_option("--n", o.bench_ns, "particle counts")->delimiter(',');
  bench->add_option("--reps", o.bench_reps, "timed steps per setting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  o.command = app.get_subcommands().front()->get_name();
  const std::vector<std::string> args(argv, argv + argc);

  try {
    return dispatch(o, args);
  } catch (const seqvar::ConfigError& e) {
    report_error("config", kConfig, e.what(), o.out_dir);
    return kConfig;
  } catch (const seqvar::ParameterError& e) {
    report_error("config", kConfig, e.what(), o.out_dir);
    return kConfig;
  } catch (const seqvar::IoError& e) {
    report_error("io", kIo, e.what(), o.out_dir);
    return kIo;
  } catch (const fs::filesystem_error& e) {
    report_error("io", kIo, e.what(), o.out_dir);
    return kIo;
  } catch (const seqvar::NumericError& e) {
    report_error("numeric", kNumeric, e.what(), o.out_dir);
    return kNumeric;
  } catch (const std::exception& e) {
    report_error("internal", kOther, e.what(), o.out_dir);
    return kOther;
  }
}
