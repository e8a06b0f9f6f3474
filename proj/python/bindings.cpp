#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "pacn/audio.hpp"
#include "pacn/checkpoint.hpp"
#include "pacn/error.hpp"
#include "pacn/cli.hpp"
#include "pacn/profiler.hpp"
#include "pacn/stats.hpp"
#include "pacn/train.hpp"

namespace py = pybind11;
using namespace pacn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_pacn, m) {
  m.doc() = "PACN toolkit bindings";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<IngestionError>(m, "IngestionError", PyExc_OSError);

  py::enum_<WiringMode>(m, "WiringMode")
      .value("parallel", WiringMode::parallel)
      .value("serial", WiringMode::serial)
      .value("no_fusion", WiringMode::no_fusion);

  py::class_<PacnConfig>(m, "PacnConfig")
      .def(py::init<>())
      .def_static("from_json", &PacnConfig::from_json)
      .def_static("load", &PacnConfig::load)
      .def("to_json", &PacnConfig::to_json)
      .def("widened", &PacnConfig::widened)
      .def("validate", &PacnConfig::validate)
      .def_readwrite("wiring_mode", &PacnConfig::wiring_mode)
      .def_readwrite("num_classes", &PacnConfig::num_classes)
      .def_readwrite("arn_enabled", &PacnConfig::arn_enabled);

  py::class_<PacnModel>(m, "PacnModel")
      .def(py::init<PacnConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &PacnModel::config)
      .def("num_params", [](const PacnModel& model) { return model.params().total_elements(); })
      .def(
          "predict", [](const PacnModel& model, const FloatArray& x) { return to_array(model.predict(to_tensor(x))); },
          py::arg("features"), "Logits (n, classes) for features (n, 2, F, T).");

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("model"));

  m.def(
      "profile",
      [](const PacnConfig& config) {
        const auto r = profile(config);
        py::list rows;
        for (const auto& row : r.rows) {
          rows.append(py::dict(py::arg("layer") = row.path, py::arg("kind") = to_string(row.kind),
                               py::arg("params") = row.params, py::arg("macs") = row.macs));
        }
        return py::dict(py::arg("params") = r.total_params, py::arg("macs") = r.total_macs, py::arg("rows") = rows);
      },
      py::arg("config"));
  m.def(
      "verify_against_runtime",
      [](const PacnConfig& config) {
        const auto v = verify_against_runtime(config);
        return py::dict(py::arg("ok") = v.ok, py::arg("counted_macs") = v.counted_macs,
                        py::arg("tallied_macs") = v.tallied_macs, py::arg("message") = v.message);
      },
      py::arg("config"));

  m.def(
      "extract_feature",
      [](const FloatArray& samples, int sample_rate) {
        AudioClip clip;
        clip.samples.assign(samples.data(), samples.data() + samples.size());
        clip.sample_rate = sample_rate;
        if (sample_rate != kSampleRate) {
          clip.samples = fit_length(resample_linear(clip.samples, static_cast<double>(kSampleRate) / sample_rate),
                                    kClipSamples);
          clip.sample_rate = kSampleRate;
        }
        return to_array(extract_feature(clip).feature);
      },
      py::arg("samples"), py::arg("sample_rate") = kSampleRate, "Log-mel and delta features (256, 65, 2).");
  m.def(
      "read_wav", [](const std::string& path) { return read_wav(path).samples; }, py::arg("path"));

  m.def(
      "kd_loss",
      [](const FloatArray& zs, const FloatArray& zt, const std::vector<int>& labels, double lam, double temperature) {
        const auto p = kd_loss(to_tensor(zs), to_tensor(zt), labels, lam, temperature);
        return py::dict(py::arg("hard") = p.hard, py::arg("distill") = p.distill, py::arg("total") = p.total);
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"), py::arg("lam") = 0.226,
      py::arg("temperature") = 2.0);
  m.def(
      "lr_at",
      [](std::int64_t step, int epochs, int warmup_epochs, double peak_lr, std::int64_t steps_per_epoch) {
        TrainConfig c;
        c.epochs = epochs;
        c.warmup_epochs = warmup_epochs;
        c.peak_lr = peak_lr;
        return lr_at(step, c, steps_per_epoch);
      },
      py::arg("step"), py::arg("epochs") = 100, py::arg("warmup_epochs") = 10, py::arg("peak_lr") = 0.002,
      py::arg("steps_per_epoch") = 1);

  m.def(
      "friedman",
      [](const ScoreMatrix& scores) {
        const auto f = friedman_test(rank_scores(scores));
        return py::dict(py::arg("average_ranks") = f.average_ranks, py::arg("statistic") = f.statistic,
                        py::arg("p_value") = f.p_value, py::arg("iman_davenport_f") = f.iman_davenport_f);
      },
      py::arg("scores"), "Scores (methods x subsets), higher is better.");
  m.def("nemenyi_cd", &nemenyi_cd, py::arg("k"), py::arg("n"), py::arg("alpha") = 0.05);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the pacn command line; returns (exit code, stdout, stderr).");
}
