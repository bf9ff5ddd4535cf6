#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "seqvar/elbo.hpp"
#include "seqvar/harness.hpp"
#include "seqvar/oracle.hpp"

namespace py = pybind11;
using namespace seqvar;

namespace {

ConjugateFamily conjugate_for(const LgssmParams& p, int truncation) {
  FamilyConfig c;
  c.dim_x = p.dim_x();
  c.dim_y = p.dim_y();
  c.truncation = truncation;
  return ConjugateFamily(c);
}

py::dict belief_dict(const std::vector<GaussianBelief>& bs) {
  const auto T = static_cast<Eigen::Index>(bs.size());
  const Eigen::Index d = T ? bs[0].mean.size() : 0;
  RowMat means(T, d);
  std::vector<Mat> covs;
  for (Eigen::Index t = 0; t < T; ++t) {
    means.row(t) = bs[t].mean.transpose();
    covs.push_back(bs[t].cov);
  }
  py::dict out;
  out["means"] = means;
  out["covs"] = covs;
  return out;
}

}  // namespace

PYBIND11_MODULE(_seqvar, m) {
  m.doc() = "Score-based recursive variational smoothing (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<LgssmParams>(m, "LgssmParams")
      .def(py::init<>())
      .def_readwrite("mu0", &LgssmParams::mu0)
      .def_readwrite("Q0", &LgssmParams::Q0)
      .def_readwrite("A", &LgssmParams::A)
      .def_readwrite("B", &LgssmParams::B)
      .def_readwrite("Q", &LgssmParams::Q)
      .def_readwrite("R", &LgssmParams::R)
      .def("validate", &LgssmParams::validate);

  m.def("random_lgssm", &random_lgssm, py::arg("dim_x"), py::arg("dim_y"), py::arg("seed"));

  m.def(
      "simulate_lgssm",
      [](const LgssmParams& p, int T, std::uint64_t seed) {
        const Trajectory tr = simulate(LgssmModel(p), T, seed);
        return py::make_tuple(tr.states, tr.observations);
      },
      py::arg("params"), py::arg("T"), py::arg("seed"), "(states, observations), each (T+1) x d");

  m.def(
      "kalman_filter", [](const LgssmParams& p, const RowMat& ys) { return belief_dict(kalman_filter(p, ys)); },
      py::arg("params"), py::arg("ys"));
  m.def(
      "rts_smoother",
      [](const LgssmParams& p, const RowMat& ys) { return belief_dict(rts_smoother(p, kalman_filter(p, ys))); },
      py::arg("params"), py::arg("ys"));
  m.def("log_likelihood", &kalman_log_likelihood, py::arg("params"), py::arg("ys"));

  m.def(
      "exact_parameters",
      [](const LgssmParams& p, int truncation) { return conjugate_for(p, truncation).exact_parameters(p); },
      py::arg("params"), py::arg("truncation") = 2,
      "Conjugate-family parameters whose smoother is the exact posterior.");

  m.def(
      "closed_form_elbo",
      [](const LgssmParams& p, const RowMat& ys, const Vec& lambda, int truncation) {
        const auto [v, g] = closed_form_elbo_and_grad(conjugate_for(p, truncation), lambda, p, ys);
        return py::make_tuple(v, g);
      },
      py::arg("params"), py::arg("ys"), py::arg("lam"), py::arg("truncation") = 2, "(elbo, gradient)");

  m.def(
      "estimate_elbo",
      [](const LgssmParams& p, const RowMat& ys, const Vec& lambda, Eigen::Index N, int M, std::uint64_t seed,
         int truncation, bool control_variate, bool kernel_entropy) {
        const ConjugateFamily fam = conjugate_for(p, truncation);
        EstimatorOptions o;
        o.control_variate = control_variate;
        o.kernel_entropy = kernel_entropy;
        py::gil_scoped_release nogil;
        const GradientEstimate g = estimate_sequence(fam, lambda, LgssmModel(p), ys, {N, M, seed}, o);
        py::gil_scoped_acquire gil;
        return py::make_tuple(g.elbo, g.grad);
      },
      py::arg("params"), py::arg("ys"), py::arg("lam"), py::arg("N") = 100, py::arg("M") = 0,
      py::arg("seed") = 0, py::arg("truncation") = 2, py::arg("control_variate") = true,
      py::arg("kernel_entropy") = true, "Particle (elbo, gradient) under a frozen lambda.");

  m.def(
      "validate_config",
      [](const std::string& text) {
        const ExperimentConfig c = ExperimentConfig::from_json(nlohmann::json::parse(text));
        c.validate();
        return c.to_json().dump();
      },
      py::arg("config_json"), "Normalized config as JSON text; raises ConfigError.");

  m.def(
      "run_experiment",
      [](const std::string& text) {
        ExperimentConfig c = ExperimentConfig::from_json(nlohmann::json::parse(text));
        c.validate();
        RunResult r;
        {
          py::gil_scoped_release nogil;
          r = run_experiment(c);
        }
        py::dict summary;
        for (const auto& [k, v] : r.summary) summary[py::str(k)] = v;
        std::vector<std::string> rows;
        for (const auto& row : r.metrics) rows.push_back(row.dump());
        return py::make_tuple(summary, rows, r.lambda);
      },
      py::arg("config_json"), "(summary, metric rows as JSON text, final lambda)");

  m.def(
      "generate",
      [](const std::string& text) {
        ExperimentConfig c = ExperimentConfig::from_json(nlohmann::json::parse(text));
        c.validate();
        generate_data(c);
      },
      py::arg("config_json"));
}
