#include "vitmae/vit.hpp"

#include <cmath>

#include "vitmae/errors.hpp"

namespace vitmae {

ModelConfig ModelConfig::named(const std::string& size) {
  ModelConfig c;
  c.name = size;
  if (size == "ti") {
    c.width = 192;
    c.heads = 3;
  } else if (size == "s") {
    c.width = 384;
    c.heads = 6;
  } else if (size == "b") {
    c.width = 768;
    c.heads = 12;
  } else {
    throw ConfigError("unknown model size '" + size + "' (expected ti, s or b)");
  }
  c.layers = 12;
  return c;
}

ModelConfig ModelConfig::imagenet(const std::string& size) {
  ModelConfig c = named(size);
  c.image_size = 224;
  c.in_channels = 3;
  c.patch_size = 16;
  c.learned_pos_embed = true;
  return c;
}

std::size_t ModelConfig::num_patches() const {
  return PatchGrid::make(image_size, image_size, patch_size, in_channels).count();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (layers == 0 || width == 0 || heads == 0) fail("layers, width and heads must be positive");
  if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (width % 4 != 0) fail("width must be divisible by 4 for sine-cosine positions");
  if (decoder_width % decoder_heads != 0 || decoder_width % 4 != 0) fail("decoder width incompatible with heads");
  if (patch_size == 0 || image_size % patch_size != 0) {
    fail("image size " + std::to_string(image_size) + " not divisible by patch size " + std::to_string(patch_size));
  }
  if (in_channels == 0 || mlp_ratio == 0 || head_hidden == 0) fail("channels, mlp ratio and head width must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) fail("mask ratio must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) fail("layer norm eps must be positive");
  if (!(pixel_std > 0.0) || !std::isfinite(pixel_mean)) fail("pixel standardization needs a finite mean and positive std");
}

PatchGrid PatchGrid::make(std::size_t image_h, std::size_t image_w, std::size_t patch_size, std::size_t channels) {
  if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0) {
    throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " is not divisible into " + std::to_string(patch_size) + "x" +
                      std::to_string(patch_size) + " patches");
  }
  return PatchGrid{patch_size, image_h, image_w, channels};
}

PatchGrid PatchGrid::of(const ModelConfig& config) {
  return make(config.image_size, config.image_size, config.patch_size, config.in_channels);
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch_size) {
  if (image.rank() != 3) throw DimensionError("patchify expects [H×W×C], got " + shape_string(image.shape()));
  const auto grid = PatchGrid::make(image.dim(0), image.dim(1), patch_size, image.dim(2));
  const std::size_t p = patch_size, c = grid.channels, w = grid.image_w;
  std::vector<T> out(grid.count() * grid.patch_dim());
  auto src = image.data();
  std::size_t o = 0;
  for (std::size_t gy = 0; gy < grid.grid_h(); ++gy)
    for (std::size_t gx = 0; gx < grid.grid_w(); ++gx)
      for (std::size_t py = 0; py < p; ++py) {
        const T* row = src.data() + ((gy * p + py) * w + gx * p) * c;
        for (std::size_t i = 0; i < p * c; ++i) out[o++] = row[i];
      }
  return Tensor<T>({grid.count(), grid.patch_dim()}, std::move(out));
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& grid) {
  if (patches.rank() != 2 || patches.dim(0) != grid.count() || patches.dim(1) != grid.patch_dim()) {
    throw DimensionError("unpatchify: patches " + shape_string(patches.shape()) + " do not match a " +
                         std::to_string(grid.grid_h()) + "x" + std::to_string(grid.grid_w()) + " grid of " +
                         std::to_string(grid.patch_dim()) + "-value patches");
  }
  const std::size_t p = grid.patch_size, c = grid.channels, w = grid.image_w;
  std::vector<T> out(grid.image_h * grid.image_w * c);
  auto src = patches.data();
  std::size_t o = 0;
  for (std::size_t gy = 0; gy < grid.grid_h(); ++gy)
    for (std::size_t gx = 0; gx < grid.grid_w(); ++gx)
      for (std::size_t py = 0; py < p; ++py) {
        T* row = out.data() + ((gy * p + py) * w + gx * p) * c;
        for (std::size_t i = 0; i < p * c; ++i) row[i] = src[o++];
      }
  return Tensor<T>({grid.image_h, grid.image_w, c}, std::move(out));
}

template <typename T, typename U>
Tensor<T> patchify_batch(const std::vector<Tensor<U>>& images, std::size_t patch_size) {
  if (images.empty()) throw DimensionError("patchify_batch: empty batch");
  std::vector<T> out;
  std::size_t rows = 0, cols = 0;
  for (const auto& img : images) {
    auto p = patchify(img, patch_size);
    if (cols && p.dim(1) != cols) throw DimensionError("patchify_batch: images differ in shape");
    rows += p.dim(0);
    cols = p.dim(1);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>({rows, cols}, std::move(out));
}

std::vector<double> sincos_position_table(std::size_t width, std::size_t grid_h, std::size_t grid_w) {
  if (width % 4 != 0) throw ConfigError("sine-cosine positions need width divisible by 4");
  const std::size_t quarter = width / 4;
  std::vector<double> table(grid_h * grid_w * width);
  for (std::size_t y = 0; y < grid_h; ++y) {
    for (std::size_t x = 0; x < grid_w; ++x) {
      double* row = table.data() + (y * grid_w + x) * width;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = std::sin(static_cast<double>(x) * omega);
        row[quarter + i] = std::cos(static_cast<double>(x) * omega);
        row[2 * quarter + i] = std::sin(static_cast<double>(y) * omega);
        row[3 * quarter + i] = std::cos(static_cast<double>(y) * omega);
      }
    }
  }
  return table;
}

template <typename T>
void ParameterSet<T>::add(std::string name, Tensor<T> tensor, bool decay) {
  entries_.push_back({std::move(name), std::move(tensor), decay});
}

template <typename T>
void ParameterSet<T>::append(const ParameterSet& other) {
  entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

template <typename T>
const typename ParameterSet<T>::Entry* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

namespace {
constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> trunc_normal(Shape shape, std::uint64_t seed, const std::string& name) {
  Rng rng(seed, name);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.truncated_normal(kInitStd));
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> xavier_uniform(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name) {
  Rng rng(seed, name);
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> values(in * out);
  for (auto& v : values) v = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
  Tensor<T> t({in, out}, std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> param_fill(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}
}  // namespace

template <typename T>
Linear<T> Linear<T>::init(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name) {
  return Linear{trunc_normal<T>({in, out}, seed, name + ".weight"), param_fill<T>({out}, T(0))};
}

template <typename T>
void Linear<T>::collect(ParameterSet<T>& set, const std::string& name) const {
  set.add(name + ".weight", weight, true);
  set.add(name + ".bias", bias, false);
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(std::size_t width) {
  return LayerNormParams{param_fill<T>({width}, T(1)), param_fill<T>({width}, T(0))};
}

template <typename T>
void LayerNormParams<T>::collect(ParameterSet<T>& set, const std::string& name) const {
  set.add(name + ".gamma", gamma, false);
  set.add(name + ".beta", beta, false);
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::init(std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                                              std::uint64_t seed, const std::string& name) {
  TransformerBlock b;
  b.norm1 = LayerNormParams<T>::init(width);
  b.qkv = Linear<T>::init(width, 3 * width, seed, name + ".qkv");
  b.proj = Linear<T>::init(width, width, seed, name + ".proj");
  b.norm2 = LayerNormParams<T>::init(width);
  b.fc1 = Linear<T>::init(width, mlp_ratio * width, seed, name + ".fc1");
  b.fc2 = Linear<T>::init(mlp_ratio * width, width, seed, name + ".fc2");
  b.heads = heads;
  return b;
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, std::size_t batch, std::size_t seq_len, double eps,
                                       const std::string& tag_prefix, ForwardProbe<T>* probe) const {
  Tensor<T> h = norm1(x, eps);
  if (probe && probe->activation_tag == tag_prefix + ".norm1") probe->activation = h;
  std::vector<T>* attn = nullptr;
  if (probe && probe->record_attention) attn = &probe->attention.emplace_back();
  Tensor<T> a = multihead_attention(qkv(h), batch, seq_len, heads, attn);
  Tensor<T> y = add(x, proj(a));
  Tensor<T> h2 = norm2(y, eps);
  if (probe && probe->activation_tag == tag_prefix + ".norm2") probe->activation = h2;
  return add(y, fc2(gelu(fc1(h2))));
}

template <typename T>
void TransformerBlock<T>::collect(ParameterSet<T>& set, const std::string& name) const {
  norm1.collect(set, name + ".norm1");
  qkv.collect(set, name + ".qkv");
  proj.collect(set, name + ".proj");
  norm2.collect(set, name + ".norm2");
  fc1.collect(set, name + ".fc1");
  fc2.collect(set, name + ".fc2");
}

template <typename T>
VitEncoder<T> VitEncoder<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  VitEncoder e;
  e.config = config;
  const auto grid = PatchGrid::of(config);
  const std::size_t d = config.width;
  e.patch_embed = Linear<T>{xavier_uniform<T>(grid.patch_dim(), d, seed, "encoder.patch_embed.weight"),
                            param_fill<T>({d}, T(0))};
  e.cls_token = trunc_normal<T>({1, d}, seed, "encoder.cls_token");
  const auto table = sincos_position_table(d, grid.grid_h(), grid.grid_w());
  e.pos_embed = Tensor<T>({grid.count(), d}, std::vector<T>(table.begin(), table.end()));
  if (config.learned_pos_embed) e.pos_embed.set_requires_grad(true);
  for (std::size_t i = 0; i < config.layers; ++i) {
    e.blocks.push_back(TransformerBlock<T>::init(d, config.heads, config.mlp_ratio, seed,
                                                 "encoder.blocks." + std::to_string(i)));
  }
  e.norm = LayerNormParams<T>::init(d);
  return e;
}

template <typename T>
Tensor<T> VitEncoder<T>::project_patches(const Tensor<T>& patches) const {
  const Tensor<T> shift({1, patches.cols()}, static_cast<T>(-config.pixel_mean));
  const auto standardized = scale(add_rows_tiled(patches, shift), static_cast<T>(1.0 / config.pixel_std));
  return add_rows_tiled(patch_embed(standardized), pos_embed);
}

template <typename T>
TokenSequence<T> VitEncoder<T>::embed(const Tensor<T>& patches, std::size_t batch) const {
  const std::size_t n = config.num_patches();
  if (patches.rows() != batch * n) {
    throw DimensionError("embed: expected " + std::to_string(batch * n) + " patch rows, got " +
                         shape_string(patches.shape()));
  }
  std::vector<std::vector<std::size_t>> all(batch, std::vector<std::size_t>(n));
  for (auto& keep : all)
    for (std::size_t k = 0; k < n; ++k) keep[k] = k;
  return select(project_patches(patches), batch, all, true);
}

template <typename T>
TokenSequence<T> VitEncoder<T>::select(const Tensor<T>& projected, std::size_t batch,
                                       const std::vector<std::vector<std::size_t>>& keep,
                                       bool class_token) const {
  const std::size_t n = config.num_patches();
  if (keep.size() != batch || projected.rows() != batch * n) {
    throw DimensionError("select: batch of " + std::to_string(batch) + " does not match tokens " +
                         shape_string(projected.shape()));
  }
  const std::size_t length = keep.front().size() + (class_token ? 1 : 0);
  std::vector<std::size_t> index;
  index.reserve(batch * length);
  // Row 0 of the concatenation is the class token; patch rows follow.
  for (std::size_t b = 0; b < batch; ++b) {
    if (keep[b].size() + (class_token ? 1 : 0) != length) {
      throw DimensionError("select: every image must keep the same number of tokens");
    }
    if (class_token) index.push_back(0);
    for (std::size_t k : keep[b]) {
      if (k >= n) throw DimensionError("select: patch index " + std::to_string(k) + " out of range");
      index.push_back(1 + b * n + k);
    }
  }
  if (index.empty()) throw DimensionError("select: no tokens kept");
  Tensor<T> tokens = gather_rows(concat_rows<T>({cls_token, projected}), index);
  return TokenSequence<T>{tokens, batch, length, class_token};
}

template <typename T>
Tensor<T> VitEncoder<T>::encode(const TokenSequence<T>& seq, ForwardProbe<T>* probe) const {
  if (seq.tokens.cols() != config.width) {
    throw DimensionError("encode: token width " + std::to_string(seq.tokens.cols()) + " vs model width " +
                         std::to_string(config.width));
  }
  Tensor<T> x = seq.tokens;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i].forward(x, seq.batch, seq.length, config.layer_norm_eps, "blocks." + std::to_string(i), probe);
  }
  return norm(x, config.layer_norm_eps);
}

template <typename T>
ParameterSet<T> VitEncoder<T>::parameters(const std::string& prefix) const {
  ParameterSet<T> set;
  patch_embed.collect(set, prefix + "patch_embed");
  set.add(prefix + "cls_token", cls_token, false);
  if (config.learned_pos_embed) set.add(prefix + "pos_embed", pos_embed, false);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(set, prefix + "blocks." + std::to_string(i));
  norm.collect(set, prefix + "norm");
  return set;
}

template <typename T>
RegressionHead<T> RegressionHead<T>::init(std::size_t width, std::size_t hidden, std::uint64_t seed) {
  // Zero output layer: an untrained regressor predicts exactly 0.
  return RegressionHead{Linear<T>::init(width, hidden, seed, "head.hidden"),
                        Linear<T>{param_fill<T>({hidden, 1}, T(0)), param_fill<T>({1}, T(0))}};
}

template <typename T>
void RegressionHead<T>::collect(ParameterSet<T>& set, const std::string& prefix) const {
  hidden.collect(set, prefix + "hidden");
  out.collect(set, prefix + "out");
}

template <typename T>
VitRegressor<T> VitRegressor<T>::init(const ModelConfig& config, std::uint64_t seed) {
  return VitRegressor{VitEncoder<T>::init(config, seed),
                      RegressionHead<T>::init(config.width, config.head_hidden, seed)};
}

template <typename T>
Tensor<T> VitRegressor<T>::forward(const Tensor<T>& patches, std::size_t batch, ForwardProbe<T>* probe) const {
  const auto seq = encoder.embed(patches, batch);
  const Tensor<T> encoded = encoder.encode(seq, probe);
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * seq.length;
  return head(gather_rows(encoded, cls_rows));
}

template <typename T>
ParameterSet<T> VitRegressor<T>::parameters() const {
  ParameterSet<T> set = encoder.parameters();
  head.collect(set, "head.");
  return set;
}

std::uint64_t count_params(const ModelConfig& config) {
  config.validate();
  const std::uint64_t d = config.width, m = config.mlp_ratio * config.width;
  const std::uint64_t patch_embed = config.patch_dim() * d + d;
  const std::uint64_t pos = config.learned_pos_embed ? config.num_patches() * d : 0;
  const std::uint64_t block = 2 * d              // norm1
                              + d * 3 * d + 3 * d  // qkv
                              + d * d + d          // proj
                              + 2 * d              // norm2
                              + d * m + m          // fc1
                              + m * d + d;         // fc2
  return patch_embed + d /* class token */ + pos + config.layers * block + 2 * d /* final norm */;
}

std::uint64_t count_classifier_params(const ModelConfig& config, std::size_t classes) {
  return static_cast<std::uint64_t>(config.width) * classes + classes;
}

std::uint64_t count_head_params(const ModelConfig& config) {
  const std::uint64_t d = config.width, h = config.head_hidden;
  return d * h + h + h + 1;
}

#define VITMAE_INSTANTIATE_VIT(T)                                                   \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> unpatchify(const Tensor<T>&, const PatchGrid&);                \
  template Tensor<T> patchify_batch<T, float>(const std::vector<Tensor<float>>&, std::size_t); \
  template Tensor<T> patchify_batch<T, double>(const std::vector<Tensor<double>>&, std::size_t); \
  template class ParameterSet<T>;                                                   \
  template struct Linear<T>;                                                        \
  template struct LayerNormParams<T>;                                               \
  template struct TransformerBlock<T>;                                              \
  template struct VitEncoder<T>;                                                    \
  template struct RegressionHead<T>;                                                \
  template struct VitRegressor<T>;

VITMAE_INSTANTIATE_VIT(float)
VITMAE_INSTANTIATE_VIT(double)

}  // namespace vitmae
