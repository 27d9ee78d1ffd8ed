#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vitmae/image_io.hpp"
#include "vitmae/tensor.hpp"
#include "vitmae/vit.hpp"

namespace vitmae {

enum class Upsample { kBilinear, kNearest };

struct GradcamOptions {
  /// Activation site; empty selects "blocks.<last>.norm1".
  std::string layer_tag;
  Upsample upsample = Upsample::kBilinear;
};

/// Relevance map at input resolution, min-max normalized to [0, 1]
/// (all zeros when the raw map is constant).
struct Heatmap {
  Tensor<double> values;  // [H × W]
  std::string sample_id;
  std::string layer_tag;
  /// Per patch token before upsampling, row-major over the patch grid.
  std::vector<double> relevance;
  double prediction = 0.0;
};

std::string default_gradcam_tag(const ModelConfig& config);

/// GradCAM on token activations A and their gradients G, both
/// [(cls + N) × D] for one image: w = token mean of G over patch tokens,
/// r_k = ReLU(Σ_d w_d·A_kd). The class-token row, when present, is ignored.
std::vector<double> token_relevance(std::span<const double> activations, std::span<const double> gradients,
                                    std::size_t tokens, std::size_t width, bool has_class_token);

/// Grid of relevance values → [H × W] map, normalized.
Tensor<double> relevance_to_map(const std::vector<double>& relevance, std::size_t grid_h, std::size_t grid_w,
                                std::size_t out_h, std::size_t out_w, Upsample mode);

/// Min-max normalization; constant input maps to zeros.
void normalize_min_max(std::span<double> values);

/// Calls on the same model instance are serialized.
template <typename T>
Heatmap gradcam(const VitRegressor<T>& model, const Tensor<float>& image, const GradcamOptions& options = {},
                const std::string& sample_id = "");

/// Blue → cyan → green → yellow → red for h ∈ [0, 1].
std::array<double, 3> colormap(double h);

/// Side-by-side raster: the grayscale input on the left, on the right the
/// blend (1 − alpha)·gray + alpha·colormap(heat).
Raster render_overlay(const Tensor<float>& image, const Heatmap& heatmap, double alpha = 0.5);

/// Writes render_overlay by extension (.png/.ppm color, .pgm luminance).
void export_overlay(const Tensor<float>& image, const Heatmap& heatmap, const std::filesystem::path& path,
                    double alpha = 0.5);

/// Raw heatmap as comma-separated rows of `%.9g` values.
void write_heatmap_text(const Heatmap& heatmap, const std::filesystem::path& path);
Tensor<double> read_heatmap_text(const std::filesystem::path& path);

}  // namespace vitmae
