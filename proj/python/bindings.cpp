#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "vitmae/checkpoint.hpp"
#include "vitmae/cli.hpp"
#include "vitmae/data.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/interpret.hpp"
#include "vitmae/mae.hpp"
#include "vitmae/training.hpp"

namespace py = pybind11;
using namespace vitmae;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> image_from_numpy(const FloatArray& a) {
  if (a.ndim() != 2 && !(a.ndim() == 3 && a.shape(2) == 1)) {
    throw DimensionError("expected an [H, W] or [H, W, 1] float image");
  }
  const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
  return Tensor<float>({h, w, 1}, std::vector<float>(a.data(), a.data() + h * w));
}

template <typename T>
py::array_t<double> to_numpy(const Tensor<T>& t, std::vector<py::ssize_t> shape) {
  py::array_t<double> out(shape);
  auto* dst = out.mutable_data();
  const auto src = t.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
  return out;
}

class Regressor {
 public:
  explicit Regressor(const std::filesystem::path& path) : model_(load_regressor<float>(load_checkpoint(path))) {}

  double predict(const FloatArray& image) const { return vitmae::predict(model_, image_from_numpy(image)); }

  std::vector<double> predict_batch(const std::vector<FloatArray>& images) const {
    std::vector<Tensor<float>> tensors;
    for (const auto& a : images) tensors.push_back(image_from_numpy(a));
    py::gil_scoped_release release;
    return vitmae::predict_batch(model_, tensors);
  }

  py::tuple gradcam(const FloatArray& image, const std::string& layer, const std::string& upsample) const {
    GradcamOptions options;
    options.layer_tag = layer;
    if (upsample == "nearest") options.upsample = Upsample::kNearest;
    else if (upsample != "bilinear") throw ConfigError("upsample must be bilinear or nearest");
    const auto h = vitmae::gradcam(model_, image_from_numpy(image), options);
    const auto side = static_cast<py::ssize_t>(h.values.dim(0));
    return py::make_tuple(to_numpy(h.values, {side, static_cast<py::ssize_t>(h.values.dim(1))}), h.prediction);
  }

  ModelConfig config() const { return model_.encoder.config; }

 private:
  VitRegressor<float> model_;
};

class Autoencoder {
 public:
  explicit Autoencoder(const std::filesystem::path& path) : model_(load_mae<float>(load_checkpoint(path))) {}

  /// Returns (masked input, reconstruction, masked-patch loss) for a seed-pinned mask.
  py::tuple reconstruct(const FloatArray& image, std::uint64_t seed) const {
    const auto img = image_from_numpy(image);
    const auto& cfg = model_.config();
    const auto grid = PatchGrid::of(cfg);
    const auto plan = vitmae::sample_mask(grid.count(), cfg.mask_ratio, seed);
    NoGradGuard no_grad;
    const auto result = model_.forward(patchify_batch<float, float>({img}, cfg.patch_size), {plan});
    const auto side = static_cast<py::ssize_t>(cfg.image_size);
    return py::make_tuple(to_numpy(masked_input_image(img, plan, cfg.patch_size), {side, side}),
                          to_numpy(reconstruct_image(img, result.predicted, plan), {side, side}),
                          static_cast<double>(result.loss.item()));
  }

  ModelConfig config() const { return model_.config(); }

 private:
  MaeModel<float> model_;
};

py::list synth_samples(std::size_t n_leds, std::uint64_t seed) {
  const auto corpus = synth_generate(n_leds, seed);
  py::list out;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    py::dict d;
    d["image"] = to_numpy(s.image, {64, 64});
    d["crack_mask"] = to_numpy(corpus.crack_masks[i], {64, 64});
    d["delta_b_max"] = s.delta_b_max;
    d["led_id"] = s.led_id;
    d["led_type"] = s.led_type;
    d["tsc"] = s.tsc;
    d["image_path"] = s.image_path;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Masked-autoencoder vision transformers for solder-joint degradation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("named", &ModelConfig::named, py::arg("size"))
      .def_static("imagenet", &ModelConfig::imagenet, py::arg("size"))
      .def_readwrite("name", &ModelConfig::name)
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("width", &ModelConfig::width)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("image_size", &ModelConfig::image_size)
      .def_readwrite("in_channels", &ModelConfig::in_channels)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("head_hidden", &ModelConfig::head_hidden)
      .def_readwrite("mask_ratio", &ModelConfig::mask_ratio)
      .def_readwrite("decoder_layers", &ModelConfig::decoder_layers)
      .def_readwrite("decoder_width", &ModelConfig::decoder_width)
      .def_readwrite("decoder_heads", &ModelConfig::decoder_heads)
      .def_property_readonly("num_patches", &ModelConfig::num_patches)
      .def_property_readonly("patch_dim", &ModelConfig::patch_dim)
      .def("validate", &ModelConfig::validate);

  m.def("count_params", &count_params, py::arg("config"), "Encoder parameters (closed form)");
  m.def("count_head_params", &count_head_params, py::arg("config"));
  m.def("compute_label", &compute_label, py::arg("b_max_t"), py::arg("b_max_0"), py::arg("led_id") = "");
  m.def(
      "classify_defect", [](double delta) { return std::string(defect_name(classify_defect(delta))); },
      py::arg("delta"));
  m.def("masked_count", &masked_count, py::arg("num_patches"), py::arg("mask_ratio"));
  m.def(
      "sample_mask",
      [](std::size_t n, double ratio, std::uint64_t seed) { return vitmae::sample_mask(n, ratio, seed).masked; },
      py::arg("num_patches"), py::arg("mask_ratio"), py::arg("seed"));
  m.def(
      "patchify",
      [](const FloatArray& image, std::size_t patch_size) {
        const auto p = patchify(image_from_numpy(image), patch_size);
        return to_numpy(p, {static_cast<py::ssize_t>(p.rows()), static_cast<py::ssize_t>(p.cols())});
      },
      py::arg("image"), py::arg("patch_size") = 8);
  m.def("synth", &synth_samples, py::arg("n_leds"), py::arg("seed"),
        "Synthetic corpus as a list of dicts (image, crack_mask, delta_b_max, led_id, led_type, tsc, image_path)");
  m.def(
      "write_synth", [](std::size_t n, std::uint64_t seed, const std::filesystem::path& dir) {
        write_corpus(synth_generate(n, seed), dir);
      },
      py::arg("n_leds"), py::arg("seed"), py::arg("directory"));
  m.def(
      "checkpoint_metadata",
      [](const std::filesystem::path& path) { return load_checkpoint(path).metadata.dump(); }, py::arg("path"),
      "Metadata block of a checkpoint as a JSON string");
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        std::vector<std::string> argv = {"vitmae"};
        argv.insert(argv.end(), args.begin(), args.end());
        int code;
        {
          py::gil_scoped_release release;
          code = vitmae::run_cli(argv, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command in-process; returns (exit code, stdout, stderr)");

  py::class_<Regressor>(m, "Regressor")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("predict", &Regressor::predict, py::arg("image"))
      .def("predict_batch", &Regressor::predict_batch, py::arg("images"))
      .def("gradcam", &Regressor::gradcam, py::arg("image"), py::arg("layer") = "",
           py::arg("upsample") = "bilinear")
      .def_property_readonly("config", &Regressor::config);

  py::class_<Autoencoder>(m, "Autoencoder")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("reconstruct", &Autoencoder::reconstruct, py::arg("image"), py::arg("seed") = 0)
      .def_property_readonly("config", &Autoencoder::config);
}
