#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "exitrec/dataset.hpp"
#include "exitrec/errors.hpp"
#include "exitrec/exit_model.hpp"
#include "exitrec/exit_policy.hpp"
#include "exitrec/graph_retriever.hpp"
#include "exitrec/metrics.hpp"
#include "exitrec/synthetic.hpp"

namespace py = pybind11;
using namespace exitrec;

PYBIND11_MODULE(_core, m) {
  m.doc() = "exitrec native core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NoHistory>(m, "NoHistory", base.ptr());
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", base.ptr());

  m.def("bidimensional_softmax", &bidimensional_softmax, py::arg("s_a"), py::arg("s_b"));
  m.def("auc", [](const std::vector<double>& scores, const std::vector<int>& labels) {
    return auc(scores, labels);
  }, py::arg("scores"), py::arg("labels"));

  m.def("generate_synthetic", [](const std::string& kind, std::size_t users, std::size_t items,
                                 std::uint64_t seed, const std::filesystem::path& out) {
    auto c = default_synthetic_config(parse_synthetic_kind(kind));
    c.users = users;
    c.items = items;
    c.seed = seed;
    const auto data = generate_synthetic(c);
    write_synthetic(data, out);
    return data.records.size();
  }, py::arg("kind"), py::arg("users"), py::arg("items"), py::arg("seed"), py::arg("out"),
  "Writes interactions.csv and groups.json; returns the interaction count.");

  // train/validation/test sample counts for a directory written by save_split
  m.def("split_sizes", [](const std::filesystem::path& dir) {
    const auto s = load_split(dir);
    return py::make_tuple(s.train.size(), s.validation.size(), s.test.size());
  });

  m.def("retrieve", [](const std::filesystem::path& table, const std::string& user, std::size_t k) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& n : retrieve_topk(load_table(table), user, k).neighbors) {
      out.emplace_back(n.user_id, n.similarity);
    }
    return out;
  }, py::arg("table"), py::arg("user"), py::arg("k") = 4);

  py::class_<ExitPolicy>(m, "ExitPolicy")
      .def(py::init([](double tau, int window, std::vector<int> layers, bool force) {
             ExitPolicy p{tau, window, std::move(layers), force};
             p.validate();
             return p;
           }),
           py::arg("tau") = 0.05, py::arg("window") = 2, py::arg("exit_layers") = std::vector<int>{},
           py::arg("force_exit_at_last") = false)
      .def_readonly("tau", &ExitPolicy::tau)
      .def_readonly("window", &ExitPolicy::window)
      .def_readonly("exit_layers", &ExitPolicy::exit_layers)
      .def_readonly("force_exit_at_last", &ExitPolicy::force_exit_at_last);

  m.def("discrepancy", &discrepancy);
  m.def("window_mean", [](const std::vector<double>& h, int m) { return window_mean(h, m); });
  m.def("should_exit", [](const ExitPolicy& p, double current, const std::vector<double>& h) {
    return should_exit(p, current, h);
  });

  // (exited, exit_layer, p_yes_at_exit, layers_evaluated); exit_layer -1 = full depth
  m.def("replay", [](const std::vector<std::pair<int, double>>& entries, std::optional<double> final_p,
                     int num_layers, const ExitPolicy& policy) {
    LayerTrace t{"", entries, final_p, num_layers};
    t.validate();
    const auto d = replay_trace(t, policy);
    return py::make_tuple(d.exited, d.exit_layer, d.p_yes_at_exit, d.layers_evaluated);
  }, py::arg("entries"), py::arg("final_p_yes"), py::arg("num_layers"), py::arg("policy"));

  m.def("head_lr", &head_lr, py::arg("lambda0"), py::arg("beta"), py::arg("depth"));

  py::class_<ExitModel>(m, "ExitModel")
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def_property_readonly("config_json", [](const ExitModel& x) { return x.config().to_json_string(); })
      .def_property_readonly("phase", [](const ExitModel& x) { return to_string(x.phase()); })
      .def("predict_yes", [](const ExitModel& x, const std::vector<int>& tokens) {
        return x.predict_yes(tokens);
      })
      .def("trunk_checksum", &ExitModel::trunk_checksum);
  m.def("new_model", [](const std::string& config_json) {
    auto c = ModelConfig::from_json_string(config_json);
    c.validate();
    return ExitModel(c);
  });
}
