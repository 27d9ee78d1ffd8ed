#include "vitmae/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace {

std::mutex& model_mutex(const void* model) {
  static std::mutex registry_guard;
  static std::map<const void*, std::unique_ptr<std::mutex>> registry;
  std::lock_guard lock(registry_guard);
  auto& slot = registry[model];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

class GradEnabledGuard {
 public:
  GradEnabledGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(true); }
  ~GradEnabledGuard() { GradMode::set_enabled(previous_); }
  GradEnabledGuard(const GradEnabledGuard&) = delete;
  GradEnabledGuard& operator=(const GradEnabledGuard&) = delete;

 private:
  bool previous_;
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::string default_gradcam_tag(const ModelConfig& config) {
  return "blocks." + std::to_string(config.layers - 1) + ".norm1";
}

std::vector<double> token_relevance(std::span<const double> activations, std::span<const double> gradients,
                                    std::size_t tokens, std::size_t width, bool has_class_token) {
  if (activations.size() != tokens * width || gradients.size() != tokens * width) {
    throw DimensionError("token_relevance: activation and gradient sizes must be tokens × width");
  }
  const std::size_t first = has_class_token ? 1 : 0;
  if (tokens <= first) throw DimensionError("token_relevance: no patch tokens");
  const std::size_t patches = tokens - first;
  std::vector<double> weights(width, 0.0);
  for (std::size_t k = first; k < tokens; ++k)
    for (std::size_t d = 0; d < width; ++d) weights[d] += gradients[k * width + d];
  for (double& w : weights) w /= static_cast<double>(patches);
  std::vector<double> relevance(patches);
  for (std::size_t k = first; k < tokens; ++k) {
    double r = 0.0;
    for (std::size_t d = 0; d < width; ++d) r += weights[d] * activations[k * width + d];
    relevance[k - first] = std::max(0.0, r);
  }
  return relevance;
}

void normalize_min_max(std::span<double> values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, max = *hi;
  const double range = max - min;
  if (!(range > 1e-12 * std::max({1e-300, std::abs(min), std::abs(max)}))) {
    std::fill(values.begin(), values.end(), 0.0);
    return;
  }
  for (double& v : values) v = (v - min) / range;
}

Tensor<double> relevance_to_map(const std::vector<double>& relevance, std::size_t grid_h, std::size_t grid_w,
                                std::size_t out_h, std::size_t out_w, Upsample mode) {
  if (relevance.size() != grid_h * grid_w) throw DimensionError("relevance does not match the patch grid");
  Tensor<double> map({out_h, out_w});
  auto out = map.mutable_data();
  auto at = [&](std::size_t r, std::size_t c) { return relevance[r * grid_w + c]; };
  const double sy = static_cast<double>(grid_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(grid_w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      double v;
      if (mode == Upsample::kNearest) {
        v = at(std::min(grid_h - 1, static_cast<std::size_t>(static_cast<double>(y) * sy)),
               std::min(grid_w - 1, static_cast<std::size_t>(static_cast<double>(x) * sx)));
      } else {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(grid_h - 1));
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(grid_w - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
        const std::size_t y1 = std::min(y0 + 1, grid_h - 1), x1 = std::min(x0 + 1, grid_w - 1);
        const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
        v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
      }
      out[y * out_w + x] = v;
    }
  }
  normalize_min_max(out);
  return map;
}

template <typename T>
Heatmap gradcam(const VitRegressor<T>& model, const Tensor<float>& image, const GradcamOptions& options,
                const std::string& sample_id) {
  if (!model.head.hidden.weight.defined() || !model.head.out.weight.defined()) {
    throw ContractError("gradcam needs a fine-tuned model with a regression head");
  }
  const auto& cfg = model.encoder.config;
  const Shape expected{cfg.image_size, cfg.image_size, cfg.in_channels};
  if (image.shape() != expected) {
    throw DimensionError("gradcam: expected image shape " + shape_string(expected) + ", got " +
                         shape_string(image.shape()));
  }
  const std::string tag = options.layer_tag.empty() ? default_gradcam_tag(cfg) : options.layer_tag;

  std::lock_guard lock(model_mutex(&model));
  GradEnabledGuard grad_on;
  ForwardProbe<T> probe;
  probe.activation_tag = tag;
  const auto pred = model.forward(patchify_batch<T, float>({image}, cfg.patch_size), 1, &probe);
  if (!probe.activation.defined()) throw ConfigError("gradcam: unknown layer tag '" + tag + "'");
  pred.backward();
  auto params = model.parameters();
  params.zero_grad();

  const std::size_t tokens = probe.activation.rows(), width = probe.activation.cols();
  std::vector<double> act(probe.activation.data().begin(), probe.activation.data().end());
  std::vector<double> grad(act.size(), 0.0);
  if (probe.activation.has_grad()) grad.assign(probe.activation.grad().begin(), probe.activation.grad().end());

  const auto grid = PatchGrid::of(cfg);
  Heatmap h;
  h.sample_id = sample_id;
  h.layer_tag = tag;
  h.prediction = static_cast<double>(pred.item());
  h.relevance = token_relevance(act, grad, tokens, width, tokens == grid.count() + 1);
  h.values = relevance_to_map(h.relevance, grid.grid_h(), grid.grid_w(), cfg.image_size, cfg.image_size,
                              options.upsample);
  return h;
}

template Heatmap gradcam<float>(const VitRegressor<float>&, const Tensor<float>&, const GradcamOptions&,
                                const std::string&);
template Heatmap gradcam<double>(const VitRegressor<double>&, const Tensor<float>&, const GradcamOptions&,
                                 const std::string&);

std::array<double, 3> colormap(double h) {
  static constexpr double stops[5][3] = {{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}};
  const double t = std::clamp(h, 0.0, 1.0) * 4.0;
  const std::size_t i = std::min<std::size_t>(3, static_cast<std::size_t>(t));
  const double f = t - static_cast<double>(i);
  return {stops[i][0] + f * (stops[i + 1][0] - stops[i][0]), stops[i][1] + f * (stops[i + 1][1] - stops[i][1]),
          stops[i][2] + f * (stops[i + 1][2] - stops[i][2])};
}

Raster render_overlay(const Tensor<float>& image, const Heatmap& heatmap, double alpha) {
  if (image.rank() != 3 || image.dim(2) != 1) throw DimensionError("overlay needs a [H×W×1] image");
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (heatmap.values.shape() != Shape{h, w}) {
    throw DimensionError("heatmap shape " + shape_string(heatmap.values.shape()) + " does not match the image");
  }
  Raster out(2 * w, h, 3);
  const auto px = image.data();
  const auto heat = heatmap.values.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double gray = std::clamp(static_cast<double>(px[y * w + x]), 0.0, 1.0);
      const auto color = colormap(heat[y * w + x]);
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(x, y, c) = to_byte(gray);
        out.at(w + x, y, c) = to_byte((1.0 - alpha) * gray + alpha * color[c]);
      }
    }
  }
  return out;
}

void export_overlay(const Tensor<float>& image, const Heatmap& heatmap, const std::filesystem::path& path,
                    double alpha) {
  const Raster rgb = render_overlay(image, heatmap, alpha);
  if (path.extension() != ".pgm") {
    write_image(path, rgb);
    return;
  }
  Raster gray(rgb.width, rgb.height, 1);
  for (std::size_t y = 0; y < rgb.height; ++y)
    for (std::size_t x = 0; x < rgb.width; ++x)
      gray.at(x, y) = static_cast<std::uint8_t>(
          std::lround(0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) + 0.114 * rgb.at(x, y, 2)));
  write_image(path, gray);
}

void write_heatmap_text(const Heatmap& heatmap, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write heatmap '" + path.string() + "'");
  const std::size_t h = heatmap.values.dim(0), w = heatmap.values.dim(1);
  const auto v = heatmap.values.data();
  char buf[32];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", v[y * w + x]);
      out << (x ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing heatmap '" + path.string() + "'");
}

Tensor<double> read_heatmap_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read heatmap '" + path.string() + "'");
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(rows + 1) + ": bad value '" + cell + "'");
      }
      ++n;
    }
    if (rows == 0) cols = n;
    else if (n != cols) throw DataError(path.string() + ":" + std::to_string(rows + 1) + ": ragged row");
    ++rows;
  }
  if (rows == 0) throw DataError("heatmap '" + path.string() + "' is empty");
  return Tensor<double>({rows, cols}, std::move(values));
}

}  // namespace vitmae
