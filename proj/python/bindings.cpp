#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>

#include "remind/experiment.hpp"

namespace py = pybind11;
using namespace remind;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const DoubleArray& a) {
  if (a.ndim() == 1) return Matrix(1, a.shape(0), std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw std::invalid_argument("expected a 1-d or 2-d array");
  return Matrix(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

ExperimentConfig resolve(const std::string& yaml, std::optional<std::uint64_t> seed) {
  ExperimentConfig c = parse_config(yaml);
  if (seed) c = with_seed(c, *seed);
  c.validate();
  return c;
}

py::dict metric_dict(const MetricBlock& b) {
  py::dict d;
  d["support"] = b.support;
  d["accuracy"] = b.accuracy;
  d["macro_f1"] = b.macro_f1;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "bindings for the remind C++ library";

  m.def(
      "uncertainty_metrics",
      [](const DoubleArray& prob) {
        const auto r = uncertainty_metrics(to_matrix(prob));
        py::dict d;
        d["entropy_nats"] = to_array(r.entropy_nats);
        d["kl_vs_uniform"] = to_array(r.kl_vs_uniform);
        d["max_prob"] = to_array(r.max_prob);
        d["mean_entropy_nats"] = r.mean_entropy_nats;
        d["mean_entropy_bits"] = r.mean_entropy_bits;
        d["mean_kl_vs_uniform"] = r.mean_kl_vs_uniform;
        d["mean_max_prob"] = r.mean_max_prob;
        d["mean_margin"] = r.mean_margin;
        d["mean_gini"] = r.mean_gini;
        return d;
      },
      py::arg("prob"), "Routing uncertainty for one probability row per token.");

  m.def(
      "update_lambda",
      [](std::vector<double> lambda, const std::map<int, double>& losses, double gamma) {
        return update_lambda(GroupWeights{std::move(lambda)}, losses, gamma).lambda;
      },
      py::arg("lambda_"), py::arg("losses"), py::arg("gamma"),
      "One multiplicative group-weight step; groups missing from `losses` keep their factor.");

  m.def("group_distribution", [](const std::vector<double>& p) { return group_distribution(p); },
        py::arg("missing_prob"), "Probability of each modality-combination group, indexed by bitmask - 1.");

  m.def("ntk", [](const DoubleArray& j) { return to_array(ntk(to_matrix(j))); }, py::arg("jacobian"));

  m.def(
      "top_eigvec",
      [](const DoubleArray& theta, double tol, int max_iter, std::uint64_t seed) {
        const EigenPair e = top_eigvec(to_matrix(theta), {tol, max_iter, seed});
        py::dict d;
        d["value"] = e.value;
        d["vector"] = e.vector;
        d["zero"] = e.zero;
        d["non_unique"] = e.non_unique;
        return d;
      },
      py::arg("theta"), py::arg("tol") = 1e-10, py::arg("max_iter") = 10000, py::arg("seed") = 0);

  m.def(
      "consistency",
      [](const std::vector<double>& a, const std::vector<double>& b) -> std::optional<double> {
        const auto c = consistency(a, b);
        if (!c.defined) return std::nullopt;
        return c.gc;
      },
      py::arg("g_all"), py::arg("g_group"), "Cosine between two gradient directions; None if either is zero.");

  m.def("default_config_yaml", [] { return dump_config(default_config()); });
  m.def(
      "normalize_config", [](const std::string& yaml) { return dump_config(resolve(yaml, std::nullopt)); },
      py::arg("yaml"), "Parse, validate and re-emit a config with every default filled in.");

  m.def(
      "generate",
      [](const std::string& out, const std::string& yaml, std::optional<std::uint64_t> seed) {
        const auto c = resolve(yaml, seed);
        py::gil_scoped_release nogil;
        run_generate(c, out);
      },
      py::arg("out"), py::arg("config") = "", py::arg("seed") = py::none());

  m.def(
      "train",
      [](const std::string& out, const std::string& yaml, std::optional<std::uint64_t> seed, bool resume) {
        const auto c = resolve(yaml, seed);
        TrainRunResult r;
        {
          py::gil_scoped_release nogil;
          r = run_train(c, out, {resume, -1});
        }
        py::dict d;
        d["final_step"] = r.final_step;
        d["model_hash"] = r.model_hash;
        d["resumed"] = r.resumed;
        d["overall"] = metric_dict(r.test_metrics.overall);
        d["tail_pooled"] = metric_dict(r.test_metrics.tail_pooled);
        return d;
      },
      py::arg("out"), py::arg("config") = "", py::arg("seed") = py::none(), py::arg("resume") = false);

  m.def(
      "analyze",
      [](const std::string& out, const std::string& yaml, std::optional<std::uint64_t> seed) {
        const auto c = resolve(yaml, seed);
        GcSummary s;
        {
          py::gil_scoped_release nogil;
          s = run_analyze(c, out);
        }
        py::dict d;
        d["defined"] = s.defined;
        d["head_group"] = s.head_group;
        d["head_median"] = s.defined ? py::object(py::float_(s.head_median)) : py::object(py::none());
        d["tail_median"] = s.defined ? py::object(py::float_(s.tail_median)) : py::object(py::none());
        d["window_steps"] = s.window_steps;
        return d;
      },
      py::arg("out"), py::arg("config") = "", py::arg("seed") = py::none());

  m.def(
      "protocol",
      [](const std::string& name, const std::string& out, const std::string& yaml, std::optional<std::uint64_t> seed) {
        const auto c = resolve(yaml, seed);
        py::gil_scoped_release nogil;
        run_protocol(c, name, out);
      },
      py::arg("name"), py::arg("out"), py::arg("config") = "", py::arg("seed") = py::none());

  m.def(
      "sweep",
      [](const std::string& out, const std::string& yaml) {
        const auto c = resolve(yaml, std::nullopt);
        py::gil_scoped_release nogil;
        return run_sweep(c, out).size();
      },
      py::arg("out"), py::arg("config") = "", "Returns the number of runs written.");
}
