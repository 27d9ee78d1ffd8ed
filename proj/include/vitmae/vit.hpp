#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vitmae/ops.hpp"
#include "vitmae/random.hpp"
#include "vitmae/tensor.hpp"

namespace vitmae {

/// Architecture hyperparameters for encoder, MAE decoder and regression head.
struct ModelConfig {
  std::string name = "ti";
  std::size_t layers = 12;
  std::size_t width = 192;
  std::size_t heads = 3;
  std::size_t patch_size = 8;
  std::size_t image_size = 64;
  std::size_t in_channels = 1;
  std::size_t mlp_ratio = 4;
  std::size_t head_hidden = 2048;
  double mask_ratio = 0.75;
  std::size_t decoder_layers = 4;
  std::size_t decoder_width = 192;
  std::size_t decoder_heads = 3;
  bool learned_pos_embed = false;
  /// Prepend the class token to the visible tokens during MAE pre-training.
  bool pretrain_class_token = true;
  double layer_norm_eps = 1e-6;
  /// Pixels enter the patch projection as (x − pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;

  /// Domain configuration (64×64×1, P=8) for "ti", "s" or "b".
  static ModelConfig named(const std::string& size);
  /// The same sizes with standard ImageNet input settings (224×224×3, P=16,
  /// learned positional embeddings).
  static ModelConfig imagenet(const std::string& size);

  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }
  std::size_t num_patches() const;
  void validate() const;
};

/// Patch layout of an image: grid_h × grid_w patches of patch_size² pixels.
struct PatchGrid {
  std::size_t patch_size = 8;
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t channels = 1;

  static PatchGrid make(std::size_t image_h, std::size_t image_w, std::size_t patch_size,
                        std::size_t channels = 1);
  static PatchGrid of(const ModelConfig& config);

  std::size_t grid_h() const { return image_h / patch_size; }
  std::size_t grid_w() const { return image_w / patch_size; }
  std::size_t count() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

/// Image [H×W×C] → [N × P²·C]; row k is patch k (row-major over the grid),
/// flattened row-major within the patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch_size);

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& grid);

/// Stacks per-image patch matrices into one [B·N × P²·C] tensor.
template <typename T, typename U>
Tensor<T> patchify_batch(const std::vector<Tensor<U>>& images, std::size_t patch_size);

/// Fixed 2-D sine-cosine table [grid_h·grid_w × width]. The first half of the
/// channels encodes the column, the second half the row.
std::vector<double> sincos_position_table(std::size_t width, std::size_t grid_h, std::size_t grid_w);

/// Named, ordered collection of trainable tensors.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool decay = true;
  };

  void add(std::string name, Tensor<T> tensor, bool decay);
  void append(const ParameterSet& other);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const Entry* find(const std::string& name) const;
  std::size_t total_numel() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in × out]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(ParameterSet<T>& set, const std::string& name) const;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams init(std::size_t width);
  Tensor<T> operator()(const Tensor<T>& x, double eps) const {
    return layer_norm(x, gamma, beta, static_cast<T>(eps));
  }
  void collect(ParameterSet<T>& set, const std::string& name) const;
};

/// Optional observation points for one forward pass.
template <typename T>
struct ForwardProbe {
  /// Tag of the activation to capture, e.g. "blocks.11.norm1".
  std::string activation_tag;
  Tensor<T> activation;
  bool record_attention = false;
  /// Per block: attention weights laid out [batch][head][query][key].
  std::vector<std::vector<T>> attention;
};

/// Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct TransformerBlock {
  LayerNormParams<T> norm1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNormParams<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  std::size_t heads = 1;

  static TransformerBlock init(std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                               std::uint64_t seed, const std::string& name);
  Tensor<T> forward(const Tensor<T>& x, std::size_t batch, std::size_t seq_len, double eps,
                    const std::string& tag_prefix, ForwardProbe<T>* probe) const;
  void collect(ParameterSet<T>& set, const std::string& name) const;
};

/// Token matrix for a batch of sequences, [batch·length × width].
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;
  std::size_t batch = 1;
  std::size_t length = 0;
  bool has_class_token = true;
};

/// ViT encoder: patch projection, positional embedding, class token, blocks, final norm.
template <typename T>
struct VitEncoder {
  ModelConfig config;
  Linear<T> patch_embed;
  Tensor<T> cls_token;  // [1 × D]
  Tensor<T> pos_embed;  // [N × D]; a parameter only when config.learned_pos_embed
  std::vector<TransformerBlock<T>> blocks;
  LayerNormParams<T> norm;

  static VitEncoder init(const ModelConfig& config, std::uint64_t seed);

  /// E·x̂_k + E_pos,k for every patch row of `patches` [B·N × P²C], with x̂
  /// the standardized pixels.
  Tensor<T> project_patches(const Tensor<T>& patches) const;
  /// Full sequence per image: class token followed by all N patch tokens.
  TokenSequence<T> embed(const Tensor<T>& patches, std::size_t batch) const;
  /// Keeps the listed patch tokens per image (indices into 0..N-1), with an
  /// optional class token in front.
  TokenSequence<T> select(const Tensor<T>& projected, std::size_t batch,
                          const std::vector<std::vector<std::size_t>>& keep, bool class_token) const;
  /// Transformer blocks followed by the final norm; shape preserved.
  Tensor<T> encode(const TokenSequence<T>& tokens, ForwardProbe<T>* probe = nullptr) const;

  ParameterSet<T> parameters(const std::string& prefix = "encoder.") const;
};

/// Class token → dense(head_hidden) → GELU → dense(1).
template <typename T>
struct RegressionHead {
  Linear<T> hidden;
  Linear<T> out;

  static RegressionHead init(std::size_t width, std::size_t hidden, std::uint64_t seed);
  Tensor<T> operator()(const Tensor<T>& class_tokens) const { return out(gelu(hidden(class_tokens))); }
  void collect(ParameterSet<T>& set, const std::string& prefix) const;
};

/// Encoder plus regression head: predicts ΔB_max from an image batch.
template <typename T>
struct VitRegressor {
  VitEncoder<T> encoder;
  RegressionHead<T> head;

  static VitRegressor init(const ModelConfig& config, std::uint64_t seed);
  /// `patches` [B·N × P²C] → predictions [B × 1].
  Tensor<T> forward(const Tensor<T>& patches, std::size_t batch, ForwardProbe<T>* probe = nullptr) const;
  ParameterSet<T> parameters() const;
};

/// Closed-form parameter count of the encoder backbone (patch embedding,
/// class token, learned positional table when enabled, blocks, final norm).
std::uint64_t count_params(const ModelConfig& config);
/// Parameters of a linear classifier on the class token.
std::uint64_t count_classifier_params(const ModelConfig& config, std::size_t classes);
std::uint64_t count_head_params(const ModelConfig& config);

}  // namespace vitmae
