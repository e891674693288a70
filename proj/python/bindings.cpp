#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lslm/errors.hpp"
#include "lslm/eval.hpp"
#include "lslm/session.hpp"
#include "lslm/version.hpp"
#include "lslm/world.hpp"

namespace py = pybind11;
using namespace lslm;

namespace {

std::string write_corpus(const std::string& config_json, const std::filesystem::path& out) {
  auto config = nlohmann::json::parse(config_json).get<world::WorldConfig>();
  config.validate();
  const auto data = world::make_dataset(config);
  world::write_dataset(data, out);
  return nlohmann::json{{"train", data.train.size()},
                        {"val", data.val.size()},
                        {"test", data.test.size()},
                        {"tts_test", data.tts_test.size()}}
      .dump();
}

std::string generate(const LslmModel& model, const std::string& context, const std::vector<int>& listen,
                     std::uint64_t seed, double top_p, bool greedy) {
  SamplerConfig s;
  s.seed = seed;
  s.top_p = top_p;
  s.greedy = greedy;
  s.validate();
  return trace_json(run_offline(model, context, listen, s)).dump();
}

}  // namespace

PYBIND11_MODULE(_lslm, m) {
  m.attr("__version__") = kVersionString;

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  py::class_<world::Codebook>(m, "Codebook")
      .def_static("build", &world::Codebook::build, py::arg("seed"), py::arg("k") = 3)
      .def("synth", &world::Codebook::synth)
      .def("invert", [](const world::Codebook& c, const std::vector<int>& tokens) {
        const auto r = c.invert(tokens);
        return py::make_tuple(r.text, r.unmatched);
      });

  py::class_<LslmModel>(m, "Model")
      .def_static("load", &LslmModel::load)
      .def_static("from_config", [](const std::string& json) { return LslmModel(nlohmann::json::parse(json).get<ModelConfig>()); })
      .def("save", &LslmModel::save)
      .def_property_readonly("listening", &LslmModel::has_listener)
      .def("generate", &generate, py::arg("context"), py::arg("listen") = std::vector<int>{}, py::arg("seed") = 0,
           py::arg("top_p") = 0.9, py::arg("greedy") = false);

  m.def("write_corpus", &write_corpus, py::arg("config_json"), py::arg("out"));
  m.def("edit_distance", [](const std::vector<int>& a, const std::vector<int>& b) { return eval::edit_distance(a, b); });
  m.def("token_error_rate", [](const std::vector<int>& hyp, const std::vector<int>& ref) {
    return eval::token_error_rate(hyp, ref);
  });
  m.def(
      "classify",
      [](bool interrupted, std::optional<int> onset, std::optional<std::string> reason, int step, int window) {
        std::optional<StopInfo> stop;
        if (reason) {
          const StopReason r = *reason == "irq" ? StopReason::Irq : *reason == "eos" ? StopReason::Eos : StopReason::MaxLen;
          stop = StopInfo{r, step};
        }
        return eval::to_string(eval::classify_outcome(interrupted, onset, stop, window));
      },
      py::arg("interrupted"), py::arg("onset"), py::arg("reason"), py::arg("step"), py::arg("window"));
  m.def("aggregate", [](long tp, long fn, long fp, long tn) {
    eval::ConfusionCounts c;
    c.tp = tp;
    c.fn = fn;
    c.fp = fp;
    c.tn = tn;
    const auto r = eval::aggregate(c);
    return py::make_tuple(r.precision, r.recall, r.f1);
  });
}
