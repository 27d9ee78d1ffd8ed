#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vitmae/tensor.hpp"

namespace vitmae {

/// 8-bit raster, `channels` interleaved values per pixel (1 = gray, 3 = RGB).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Reads PNG (any bit depth / color type, reduced to 8-bit gray) or binary /
/// ASCII PGM. Throws DataError on unreadable input.
Raster read_gray_image(const std::filesystem::path& path);
/// Reads PNG/PPM/PGM keeping the channel count (1 or 3).
Raster read_image(const std::filesystem::path& path);

/// Writes by extension: .png, .pgm (gray) or .ppm (RGB).
void write_image(const std::filesystem::path& path, const Raster& image);

/// Gray raster → [H×W×1] values in [0, 1].
Tensor<float> raster_to_tensor(const Raster& image);
/// [H×W×1] values clamped to [0, 1] → gray raster (rounded).
Raster tensor_to_raster(const Tensor<float>& image);

}  // namespace vitmae
