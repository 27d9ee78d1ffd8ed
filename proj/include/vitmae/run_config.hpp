#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vitmae/interpret.hpp"
#include "vitmae/training.hpp"
#include "vitmae/vit.hpp"

namespace vitmae {

/// One `section.key = value` assignment with its origin for error messages.
struct ConfigAssignment {
  std::string key;
  std::string value;
  std::string origin;
};

/// Line-oriented `key = value` text with `[section]` headers; `#` and `;`
/// start comments. Keys are returned fully qualified ("model.width").
std::vector<ConfigAssignment> parse_config_text(const std::string& text, const std::string& source = "<config>");
std::vector<ConfigAssignment> read_config_file(const std::filesystem::path& path);

/// Everything a subcommand needs: model, both training phases, data
/// location, output directory and the run seed.
struct RunConfig {
  ModelConfig model = ModelConfig::named("ti");
  TrainConfig pretrain = TrainConfig::defaults(Phase::kPretrain);
  TrainConfig finetune = TrainConfig::defaults(Phase::kFinetune);

  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string precision = "f32";
  std::filesystem::path out = "run";
  std::filesystem::path from_checkpoint;

  std::filesystem::path data_root;
  /// Relative paths resolve against data_root.
  std::filesystem::path manifest = "manifest.csv";
  /// Generate this many synthetic LEDs instead of reading data_root.
  std::size_t synthetic = 0;
  std::string split = "test";
  std::vector<std::string> images;
  std::size_t max_images = 8;

  std::string gradcam_layer;
  Upsample upsample = Upsample::kBilinear;
  double overlay_alpha = 0.5;

  /// Applies assignments in order, except that `model.size` (which resets the
  /// architecture) is applied first. Warmup defaults to epochs / 10 unless set.
  static RunConfig resolve(const std::vector<ConfigAssignment>& assignments);

  /// Copies seed, threads and precision into both training configs and
  /// validates every field.
  void finalize();

  /// The resolved config in the same text format; parsing it back yields an
  /// identical RunConfig.
  std::string to_text() const;

  std::filesystem::path manifest_path() const;

  static const std::vector<std::string>& keys();
};

}  // namespace vitmae
