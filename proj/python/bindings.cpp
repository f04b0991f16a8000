#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "badcrnn/dataset.hpp"
#include "badcrnn/errors.hpp"
#include "badcrnn/eval.hpp"
#include "badcrnn/features.hpp"
#include "badcrnn/net.hpp"
#include "badcrnn/train.hpp"

namespace py = pybind11;
using namespace badcrnn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const FeatureMatrix& fm) {
  Array out({fm.frames, fm.bands});
  std::copy(fm.values.begin(), fm.values.end(), out.mutable_data());
  return out;
}

FeatureMatrix to_features(const Array& a, std::string id = {}) {
  if (a.ndim() != 2) throw ShapeError("features must be a 2-D (frames, bands) array");
  FeatureMatrix fm{std::move(id), static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                   std::vector<double>(a.data(), a.data() + a.size())};
  return fm;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array vector_array(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const std::vector<Array>& features, const std::vector<int>& labels) {
  if (features.size() != labels.size()) throw ShapeError("features and labels differ in length");
  Dataset out;
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.push_back({to_features(features[i], "clip" + std::to_string(i)), labels[i]});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "C++ core of the badcrnn bird audio detector";
  m.attr("__version__") = BADCRNN_VERSION;
  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def(
      "synth_clip",
      [](bool positive, std::uint64_t seed, double duration_s, int sample_rate, double noise_level,
         std::pair<double, double> chirp_band, std::pair<int, int> n_chirps, double distractor_level) {
        SynthSpec spec;
        spec.positive = positive;
        spec.duration_s = duration_s;
        spec.sample_rate = sample_rate;
        spec.noise_level = noise_level;
        spec.chirp_band = chirp_band;
        spec.n_chirps = n_chirps;
        spec.distractor_level = distractor_level;
        const auto [clip, label] = synth_clip(spec, seed);
        return py::make_tuple(vector_array(clip.samples), label);
      },
      "Synthetic clip: noise, plus linear-FM chirps when positive. Returns (samples, label).",
      py::arg("positive") = true, py::arg("seed") = 0, py::arg("duration_s") = 10.0,
      py::arg("sample_rate") = 44100, py::arg("noise_level") = 0.1,
      py::arg("chirp_band") = std::pair<double, double>{2000.0, 8000.0},
      py::arg("n_chirps") = std::pair<int, int>{1, 4}, py::arg("distractor_level") = 0.0);

  m.def(
      "decode_wav",
      [](const std::filesystem::path& path) {
        const auto clip = decode_wav(path);
        return py::make_tuple(vector_array(clip.samples), clip.sample_rate);
      },
      "Mono samples in [-1, 1] and the sample rate of a PCM16 or float32 WAV file.", py::arg("path"));

  m.def(
      "extract_features",
      [](const Array& samples, int sample_rate, int n_mels, double frame_ms, double overlap, int fft_size,
         double fmin, double fmax) {
        FeatureConfig config;
        config.n_mels = n_mels;
        config.frame_ms = frame_ms;
        config.overlap_fraction = overlap;
        config.fft_size = fft_size;
        config.fmin = fmin;
        config.fmax = fmax;
        AudioClip clip{"clip", to_vector(samples), sample_rate};
        py::gil_scoped_release release;
        auto fm = extract_features(clip, config);
        py::gil_scoped_acquire acquire;
        return to_array(fm);
      },
      "Log mel-band energies, shape (frames, n_mels).", py::arg("samples"), py::arg("sample_rate"),
      py::arg("n_mels") = 40, py::arg("frame_ms") = 40.0, py::arg("overlap") = 0.5, py::arg("fft_size") = 2048,
      py::arg("fmin") = 0.0, py::arg("fmax") = -1.0);

  m.def(
      "fit_norm_stats",
      [](const std::vector<Array>& features) {
        std::vector<FeatureMatrix> fms;
        for (const auto& a : features) fms.push_back(to_features(a));
        const auto stats = fit_norm_stats(fms);
        return py::make_tuple(vector_array(stats.mean), vector_array(stats.stddev));
      },
      "Per-band (mean, std) over all frames of the given feature arrays.", py::arg("features"));

  m.def(
      "normalize",
      [](const Array& features, const Array& mean, const Array& stddev) {
        return to_array(normalize(to_features(features), NormStats{to_vector(mean), to_vector(stddev)}));
      },
      py::arg("features"), py::arg("mean"), py::arg("std"));

  m.def(
      "save_features",
      [](const std::filesystem::path& path, const Array& features, const std::string& clip_id) {
        save_features(to_features(features, clip_id), path);
      },
      "Write a BADF feature file (values stored as float32).", py::arg("path"), py::arg("features"),
      py::arg("clip_id") = "");
  m.def(
      "load_features",
      [](const std::filesystem::path& path) {
        const auto fm = load_features(path);
        return py::make_tuple(to_array(fm), fm.clip_id);
      },
      "Read a BADF feature file. Returns (features, clip_id).", py::arg("path"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_feature_maps", &ModelConfig::n_feature_maps)
      .def_readwrite("conv_pooling", &ModelConfig::conv_pooling)
      .def_readwrite("kernel", &ModelConfig::kernel)
      .def_readwrite("n_recurrent_layers", &ModelConfig::n_recurrent_layers)
      .def_property(
          "recurrent_type", [](const ModelConfig& c) { return to_string(c.recurrent_type); },
          [](ModelConfig& c, const std::string& s) { c.recurrent_type = recurrent_type_from_string(s); })
      .def_readwrite("n_recurrent_units", &ModelConfig::n_recurrent_units)
      .def_readwrite("dropout_rate", &ModelConfig::dropout_rate)
      .def_readwrite("n_mels", &ModelConfig::n_mels)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate)
      .def("to_json", [](const ModelConfig& c) { return config_to_json(c); })
      .def_static("from_json", &config_from_json, py::arg("text"))
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + config_to_json(c) + ")"; });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("jobs", &TrainConfig::jobs)
      .def("__repr__", [](const TrainConfig& c) { return "TrainConfig(" + train_config_to_json(c) + ")"; });

  py::class_<CrnnModel>(m, "Model")
      .def(py::init(&init_model), "Freshly initialised model.", py::arg("config"))
      .def_readonly("config", &CrnnModel::config)
      .def_property_readonly("n_params", &parameter_count)
      .def(
          "predict", [](const CrnnModel& model, const Array& features) { return predict(model, to_features(features)); },
          "Bird probability for one (frames, n_mels) feature array.", py::arg("features"))
      .def(
          "activations",
          [](const CrnnModel& model, const Array& features, std::size_t layer, std::size_t filter) {
            const auto map = export_activations(model, to_features(features), layer, filter);
            Array out({map.dim(0), map.dim(1)});
            std::copy(map.data.begin(), map.data.end(), out.mutable_data());
            return out;
          },
          "Post-ReLU, pre-pooling map of one filter, shape (frames, bands).", py::arg("features"),
          py::arg("layer"), py::arg("filter"))
      .def("save", [](const CrnnModel& model, const std::filesystem::path& path) { save_model(model, path); },
           py::arg("path"))
      .def_static("load", &load_model, py::arg("path"))
      .def("to_bytes",
           [](const CrnnModel& model) {
             const auto bytes = encode_model(model);
             return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
           })
      .def_static("from_bytes", [](const py::bytes& data) {
        const std::string s = data;
        return decode_model(std::vector<std::uint8_t>(s.begin(), s.end()));
      });

  m.def(
      "train",
      [](const std::vector<Array>& train_features, const std::vector<int>& train_labels,
         const std::vector<Array>& val_features, const std::vector<int>& val_labels, const ModelConfig& model,
         const TrainConfig& config) {
        const auto train_set = to_dataset(train_features, train_labels);
        const auto val_set = to_dataset(val_features, val_labels);
        TrainRun run;
        {
          py::gil_scoped_release release;
          run = train(config, model, train_set, val_set);
        }
        py::list history;
        for (const auto& r : run.history) {
          py::dict row;
          row["epoch"] = r.epoch;
          row["train_loss"] = r.train_loss;
          row["val_auc"] = r.val_auc;
          row["seconds"] = r.seconds;
          history.append(row);
        }
        py::dict result;
        result["model"] = run.best_model;
        result["best_epoch"] = run.best_epoch;
        result["best_val_auc"] = run.best_val_auc;
        result["history"] = history;
        return result;
      },
      "Adam training with early stopping on validation AUC. Returns a dict with the best model.",
      py::arg("train_features"), py::arg("train_labels"), py::arg("val_features"), py::arg("val_labels"),
      py::arg("model_config") = ModelConfig{}, py::arg("train_config") = TrainConfig{});

  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        const auto report = auc(scores, labels);
        return py::make_tuple(report.auc, report.roc);
      },
      "Midrank AUC and ROC points (fpr, tpr). Returns (auc, roc).", py::arg("scores"), py::arg("labels"));

  m.def(
      "ensemble_average",
      [](const std::vector<std::map<std::string, double>>& sets) {
        std::vector<std::vector<Prediction>> converted;
        for (const auto& set : sets) {
          auto& out = converted.emplace_back();
          for (const auto& [id, p] : set) out.push_back({id, p});
        }
        std::map<std::string, double> merged;
        for (const auto& p : ensemble_average(converted)) merged[p.clip_id] = p.probability;
        return merged;
      },
      "Per-clip mean probability over {clip_id: probability} dicts.", py::arg("sets"));

  m.def(
      "enumerate_grid", [](const ModelConfig& base) { return enumerate_grid(GridSpace::standard(), base); },
      "The 48 configurations of the standard hyperparameter grid.", py::arg("base") = ModelConfig{});

  m.def(
      "gradient_check",
      [](const ModelConfig& config, std::uint64_t seed, std::size_t frames) {
        GradientCheckOptions options;
        options.frames = frames;
        return gradient_check(config, seed, options);
      },
      "Largest relative error between backprop and central differences.", py::arg("config"),
      py::arg("seed") = 0, py::arg("frames") = 7);
}
