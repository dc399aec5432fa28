#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>

#include "fedmeta/errors.hpp"
#include "fedmeta/fedsim.hpp"
#include "fedmeta/harness.hpp"
#include "fedmeta/losses.hpp"

namespace py = pybind11;
using namespace fedmeta;

namespace {

Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast> &a) {
  if (a.ndim() != 2)
    throw py::value_error("expected a 2-d array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

ExperimentConfig parse_config(const std::string &json_text) {
  return ExperimentConfig::from_json(
      json_text.empty() ? nlohmann::json::object() : nlohmann::json::parse(json_text));
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Federated attention-based meta-learning simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "select_clients",
      [](double global_acc, const std::vector<double> &accs) {
        return select_clients(global_acc, accs);
      },
      py::arg("global_acc"), py::arg("client_accs"),
      "Indices of clients whose accuracy is at least the global accuracy.");
  m.def(
      "fusion_weights", [](const std::vector<double> &accs) { return fusion_weights(accs); },
      py::arg("accs"), "Fusion weights proportional to accuracy.");

  m.def(
      "focal_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast> &logits,
         const std::vector<int> &labels, double eta, double lambda) {
        return focal_loss(to_matrix(logits), labels, FocalParams{eta, lambda}).loss;
      },
      py::arg("logits"), py::arg("labels"), py::arg("eta") = 5.0, py::arg("lam") = 2.0,
      "Mean focal loss of a batch of logits.");
  m.def(
      "cross_entropy",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast> &logits,
         const std::vector<int> &labels) { return cross_entropy(to_matrix(logits), labels).loss; },
      py::arg("logits"), py::arg("labels"));

  m.def(
      "gen_synthetic",
      [](const std::string &spec_json) {
        SyntheticSpec spec;
        if (!spec_json.empty())
          spec = nlohmann::json::parse(spec_json).get<SyntheticSpec>();
        auto ds = gen_synthetic(spec);
        py::array_t<double> x({ds.rows(), ds.dim()});
        std::copy(ds.features.data.begin(), ds.features.data.end(), x.mutable_data());
        py::array_t<int> y(ds.labels.size());
        std::copy(ds.labels.begin(), ds.labels.end(), y.mutable_data());
        return py::make_tuple(x, y);
      },
      py::arg("spec_json") = "", "Synthetic dataset as (features, labels).");

  m.def(
      "resolve_config",
      [](const std::string &json_text) { return parse_config(json_text).to_json().dump(); },
      py::arg("config_json") = "", "Fully resolved config as JSON text.");
  m.def(
      "config_hash", [](const std::string &json_text) { return parse_config(json_text).hash(); },
      py::arg("config_json") = "");

  m.def(
      "run",
      [](const std::string &json_text, std::optional<std::filesystem::path> out_dir) {
        auto cfg = parse_config(json_text);
        RunReport rep;
        {
          py::gil_scoped_release release;
          rep = run_experiment(cfg, out_dir);
        }
        return rep.to_json().dump();
      },
      py::arg("config_json"), py::arg("out_dir") = std::nullopt,
      "Runs every seed of a config and returns report.json as text.");

  m.def(
      "gradcheck",
      []() {
        py::dict out;
        for (const auto &p : cli_gradcheck())
          out[py::str(p.name)] = py::make_tuple(p.max_rel_err, p.passed);
        return out;
      },
      "Maximum relative error and pass flag per gradient path.");
}
