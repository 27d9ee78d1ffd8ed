#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitmae/image_io.hpp"
#include "vitmae/random.hpp"
#include "vitmae/tensor.hpp"

namespace vitmae {

inline constexpr std::size_t kImageSide = 64;
inline constexpr std::size_t kCropSide = 56;
inline constexpr int kTscValues[] = {0, 100, 500, 1000, 1500};

/// Relative change of the thermal-impedance peak: b_max_t / b_max_0 - 1.
double compute_label(double b_max_t, double b_max_0, const std::string& led_id = "");

struct TtaRecord {
  std::string led_id;
  int tsc = 0;
  double b_max = 0.0;
};

struct ManifestRow {
  std::string image_path;
  std::string led_id;
  std::string led_type;
  int tsc = 0;
  double b_max = 0.0;
};

/// Header `image_path,led_id,led_type,tsc,b_max`; blank lines ignored.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);

struct LabeledSample {
  Tensor<float> image;  // [64×64×1] in [0, 1]
  double delta_b_max = 0.0;
  std::string led_id;
  int tsc = 0;
  std::string led_type;
  std::string image_path;
};

/// Image paths in the manifest are resolved relative to `root`.
std::vector<LabeledSample> load_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest_path);

/// Labels from manifest rows alone (no image decoding).
std::vector<double> labels_from_rows(const std::vector<ManifestRow>& rows);

struct SplitManifest {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  const std::vector<std::size_t>& named(const std::string& split) const;
};

/// Groups samples by LED and assigns 60/20/20 of the LEDs to train/val/test.
SplitManifest split_dataset(const std::vector<LabeledSample>& samples, std::uint64_t seed);
SplitManifest split_by_led(const std::vector<std::string>& led_ids, std::uint64_t seed);

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  std::size_t crop_x = (kImageSide - kCropSide) / 2;
  std::size_t crop_y = (kImageSide - kCropSide) / 2;
};

AugmentParams sample_augment(Rng& rng);
Tensor<float> apply_augment(const Tensor<float>& image, const AugmentParams& params);
Tensor<float> augment(const Tensor<float>& image, Rng& rng);

Tensor<float> flip_horizontal(const Tensor<float>& image);
Tensor<float> flip_vertical(const Tensor<float>& image);
/// Bilinear resample of an [h×w×1] image to [out_h×out_w×1] (half-pixel centers).
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w);

struct SyntheticLed {
  std::string led_id;
  std::string led_type;
  std::vector<std::size_t> crack_pixels;  // per TSC step
};

struct SyntheticCorpus {
  std::vector<LabeledSample> samples;      // LED-major, TSC ascending
  std::vector<Tensor<float>> crack_masks;  // [64×64×1] 0/1 per sample
  std::vector<ManifestRow> rows;           // b_max values behind the labels
  std::vector<SyntheticLed> leds;
};

SyntheticCorpus synth_generate(std::size_t n_leds, std::uint64_t seed);

/// Writes images/, masks/ and manifest.csv under `dir`; the manifest loads back
/// with load_dataset(dir, dir / "manifest.csv").
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

/// Reads masks/<stem>.png matching each sample's image file name, if present.
std::vector<Tensor<float>> load_masks(const std::filesystem::path& dir, const std::vector<LabeledSample>& samples);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace vitmae
