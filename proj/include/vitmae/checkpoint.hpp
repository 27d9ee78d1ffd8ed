#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitmae/tensor.hpp"
#include "vitmae/vit.hpp"

namespace vitmae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

const char* dtype_name(DType dtype);

/// One named tensor as stored on disk: raw little-endian values.
struct StoredTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return shape_numel(shape); }

  template <typename T>
  static StoredTensor from_values(std::string name, Shape shape, std::span<const T> values);
  template <typename T>
  static StoredTensor from(std::string name, const Tensor<T>& tensor) {
    return from_values<T>(std::move(name), tensor.shape(), tensor.data());
  }
  /// Values converted to T regardless of the stored dtype.
  template <typename T>
  std::vector<T> values() const;

  bool operator==(const StoredTensor&) const = default;
};

/// Metadata (JSON) plus an ordered list of tensors.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  const StoredTensor& at(const std::string& name) const;
  /// Replaces a tensor with the same name or appends.
  void put(StoredTensor tensor);
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stores every entry as `prefix + entry.name` in the tensor's own precision.
template <typename T>
void store_parameters(Checkpoint& checkpoint, const ParameterSet<T>& params, const std::string& prefix = "");

/// Copies stored values into the parameter tensors in place. Missing names
/// are an error unless `allow_missing`; shape mismatches always are.
/// Returns the number of parameters restored.
template <typename T>
std::size_t restore_parameters(const Checkpoint& checkpoint, ParameterSet<T>& params, const std::string& prefix = "",
                               bool allow_missing = false);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace vitmae
