#include "vitmae/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Raster read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open image " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8)) {
    throw DataError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialization failed");
  }
  Raster out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG data in " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.pixels.resize(out.width * out.height * out.channels);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * out.width * out.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const Raster& image) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialization failed");
  }
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encoding failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data() + y * image.width * image.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Next whitespace-delimited token of a PNM header, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string token;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
    } else {
      token.push_back(c);
    }
  }
  return token;
}

Raster read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  const std::string magic = pnm_token(in);
  std::size_t channels = 0;
  bool binary = true;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else if (magic == "P2") channels = 1, binary = false;
  else if (magic == "P3") channels = 3, binary = false;
  else throw DataError("unsupported PNM variant '" + magic + "' in " + path.string());
  Raster out;
  try {
    out.width = std::stoul(pnm_token(in));
    out.height = std::stoul(pnm_token(in));
    const unsigned long maxval = std::stoul(pnm_token(in));
    if (maxval == 0 || maxval > 255) throw DataError("only 8-bit PNM images are supported: " + path.string());
    out.channels = channels;
    out.pixels.resize(out.width * out.height * channels);
    if (binary) {
      in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
      if (in.gcount() != static_cast<std::streamsize>(out.pixels.size())) {
        throw DataError("truncated PNM data in " + path.string());
      }
    } else {
      for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::stoul(pnm_token(in)));
    }
    if (maxval != 255) {
      for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / static_cast<double>(maxval)));
    }
  } catch (const std::logic_error&) {
    throw DataError("malformed PNM header in " + path.string());
  }
  return out;
}

void write_pnm(const std::filesystem::path& path, const Raster& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

Raster read_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
  throw DataError("unsupported image format '" + ext + "' for " + path.string());
}

Raster read_gray_image(const std::filesystem::path& path) {
  Raster img = read_image(path);
  if (img.channels == 1) return img;
  Raster gray(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const auto* p = img.pixels.data() + i * 3;
    gray.pixels[i] = static_cast<std::uint8_t>(std::lround(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]));
  }
  return gray;
}

void write_image(const std::filesystem::path& path, const Raster& image) {
  if (image.channels != 1 && image.channels != 3) throw DataError("only gray or RGB rasters can be written");
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw DataError("raster buffer does not match its dimensions");
  }
  const std::string ext = lower_extension(path);
  if (ext == ".png") return write_png(path, image);
  if (ext == ".pgm" && image.channels == 1) return write_pnm(path, image);
  if (ext == ".ppm" && image.channels == 3) return write_pnm(path, image);
  throw DataError("cannot write a " + std::to_string(image.channels) + "-channel image as '" + ext + "'");
}

Tensor<float> raster_to_tensor(const Raster& image) {
  if (image.channels != 1) throw DataError("expected a single-channel image");
  std::vector<float> values(image.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return Tensor<float>({image.height, image.width, 1}, std::move(values));
}

Raster tensor_to_raster(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw DimensionError("tensor_to_raster expects [H×W×1], got " + shape_string(image.shape()));
  }
  Raster out(image.dim(1), image.dim(0), 1);
  auto v = image.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

}  // namespace vitmae
