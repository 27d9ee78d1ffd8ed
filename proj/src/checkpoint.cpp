#include "vitmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'E', 'C'};

using Kind = CheckpointError::Kind;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(Kind::kTruncated, std::string("checkpoint truncated while reading ") + what);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename U>
  U le(const char* what) {
    auto s = take(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(s[i]) << (8 * i));
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
  }
  throw CheckpointError(Kind::kContent, "unknown dtype tag");
}

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

// Raw value bytes in little-endian order.
template <typename T>
void append_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  out.reserve(out.size() + values.size() * sizeof(T));
  for (T v : values) put_le(out, std::bit_cast<Bits>(v));
}

template <typename T>
T read_value(const std::uint8_t* p) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  Bits b = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) b |= static_cast<Bits>(static_cast<Bits>(p[i]) << (8 * i));
  return std::bit_cast<T>(b);
}

}  // namespace

const char* dtype_name(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

template <typename T>
StoredTensor StoredTensor::from_values(std::string name, Shape shape, std::span<const T> values) {
  if (shape_numel(shape) != values.size()) throw DimensionError("stored tensor shape does not match its values");
  StoredTensor t;
  t.name = std::move(name);
  t.dtype = dtype_of<T>();
  t.shape = std::move(shape);
  append_values(t.bytes, values);
  return t;
}

template <typename T>
std::vector<T> StoredTensor::values() const {
  const std::size_t n = numel();
  if (bytes.size() != n * dtype_size(dtype)) {
    throw CheckpointError(Kind::kContent, "tensor '" + name + "' has an inconsistent byte length");
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = dtype == DType::kF32 ? static_cast<T>(read_value<float>(bytes.data() + 4 * i))
                                  : static_cast<T>(read_value<double>(bytes.data() + 8 * i));
  }
  return out;
}

template StoredTensor StoredTensor::from_values<float>(std::string, Shape, std::span<const float>);
template StoredTensor StoredTensor::from_values<double>(std::string, Shape, std::span<const double>);
template std::vector<float> StoredTensor::values<float>() const;
template std::vector<double> StoredTensor::values<double>() const;

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const StoredTensor& Checkpoint::at(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw CheckpointError(Kind::kContent, "checkpoint has no tensor named '" + name + "'");
}

void Checkpoint::put(StoredTensor tensor) {
  for (auto& t : tensors) {
    if (t.name == tensor.name) {
      t = std::move(tensor);
      return;
    }
  }
  tensors.push_back(std::move(tensor));
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = checkpoint.metadata.dump();
  put_le<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) {
      throw CheckpointError(Kind::kContent, "tensor '" + t.name + "' has an inconsistent byte length");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_le<std::uint64_t>(out, d);
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(Kind::kMagic, "not a checkpoint file (bad magic bytes)");
  }
  in.take(4, "magic");
  const auto version = in.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersion, "unsupported checkpoint version " + std::to_string(version) +
                                              " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const auto meta_len = in.le<std::uint64_t>("metadata length");
  auto meta = in.take(meta_len, "metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta.begin(), meta.end());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kContent, std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = in.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = in.le<std::uint32_t>("tensor name length");
    auto name = in.take(name_len, "tensor name");
    t.name.assign(name.begin(), name.end());
    const auto tag = in.take(1, "dtype tag")[0];
    if (tag != static_cast<std::uint8_t>(DType::kF32) && tag != static_cast<std::uint8_t>(DType::kF64)) {
      throw CheckpointError(Kind::kContent, "tensor '" + t.name + "' has unknown dtype tag " + std::to_string(tag));
    }
    t.dtype = static_cast<DType>(tag);
    const auto rank = in.le<std::uint32_t>("tensor rank");
    if (rank > 16) throw CheckpointError(Kind::kContent, "tensor '" + t.name + "' has implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(in.le<std::uint64_t>("tensor shape"));
    auto data = in.take(t.numel() * dtype_size(t.dtype), "tensor data");
    t.bytes.assign(data.begin(), data.end());
    ck.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError(Kind::kContent, "trailing bytes after the last tensor");
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(Kind::kIo, "cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(Kind::kIo, "write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
void store_parameters(Checkpoint& checkpoint, const ParameterSet<T>& params, const std::string& prefix) {
  for (const auto& e : params.entries()) checkpoint.put(StoredTensor::from(prefix + e.name, e.tensor));
}

template <typename T>
std::size_t restore_parameters(const Checkpoint& checkpoint, ParameterSet<T>& params, const std::string& prefix,
                               bool allow_missing) {
  std::size_t restored = 0;
  for (auto& e : params.entries()) {
    const StoredTensor* t = checkpoint.find(prefix + e.name);
    if (!t) {
      if (allow_missing) continue;
      throw CheckpointError(Kind::kContent, "checkpoint has no tensor named '" + prefix + e.name + "'");
    }
    if (t->shape != e.tensor.shape()) {
      throw CheckpointError(Kind::kContent, "tensor '" + t->name + "' has shape " + shape_string(t->shape) +
                                                ", model expects " + shape_string(e.tensor.shape()));
    }
    const auto values = t->values<T>();
    std::copy(values.begin(), values.end(), e.tensor.mutable_data().begin());
    ++restored;
  }
  return restored;
}

template void store_parameters<float>(Checkpoint&, const ParameterSet<float>&, const std::string&);
template void store_parameters<double>(Checkpoint&, const ParameterSet<double>&, const std::string&);
template std::size_t restore_parameters<float>(const Checkpoint&, ParameterSet<float>&, const std::string&, bool);
template std::size_t restore_parameters<double>(const Checkpoint&, ParameterSet<double>&, const std::string&, bool);

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"name", c.name},
          {"layers", c.layers},
          {"width", c.width},
          {"heads", c.heads},
          {"patch_size", c.patch_size},
          {"image_size", c.image_size},
          {"in_channels", c.in_channels},
          {"mlp_ratio", c.mlp_ratio},
          {"head_hidden", c.head_hidden},
          {"mask_ratio", c.mask_ratio},
          {"decoder_layers", c.decoder_layers},
          {"decoder_width", c.decoder_width},
          {"decoder_heads", c.decoder_heads},
          {"learned_pos_embed", c.learned_pos_embed},
          {"pretrain_class_token", c.pretrain_class_token},
          {"layer_norm_eps", c.layer_norm_eps},
          {"pixel_mean", c.pixel_mean},
          {"pixel_std", c.pixel_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.name = j.at("name").get<std::string>();
    c.layers = j.at("layers").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.head_hidden = j.at("head_hidden").get<std::size_t>();
    c.mask_ratio = j.at("mask_ratio").get<double>();
    c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    c.decoder_width = j.at("decoder_width").get<std::size_t>();
    c.decoder_heads = j.at("decoder_heads").get<std::size_t>();
    c.learned_pos_embed = j.at("learned_pos_embed").get<bool>();
    c.pretrain_class_token = j.at("pretrain_class_token").get<bool>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.pixel_mean = j.at("pixel_mean").get<double>();
    c.pixel_std = j.at("pixel_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kContent, std::string("checkpoint model config is incomplete: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace vitmae
