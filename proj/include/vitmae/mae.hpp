#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitmae/random.hpp"
#include "vitmae/tensor.hpp"
#include "vitmae/vit.hpp"

namespace vitmae {

/// Split of the patch indices {0..N-1} into masked and visible sets.
struct MaskPlan {
  std::size_t num_patches = 0;
  std::vector<std::size_t> masked;   // ascending
  std::vector<std::size_t> visible;  // encoder input order
  std::uint64_t seed = 0;

  /// One flag per patch, 1 where masked.
  std::vector<std::uint8_t> mask_flags() const;
  bool is_masked(std::size_t k) const;
};

/// ⌊N·S⌋, robust to the binary representation of decimal ratios.
std::size_t masked_count(std::size_t num_patches, double mask_ratio);

/// Uniform sample of ⌊N·S⌋ distinct indices without replacement.
MaskPlan sample_mask(std::size_t num_patches, double mask_ratio, Rng& rng);
MaskPlan sample_mask(std::size_t num_patches, double mask_ratio, std::uint64_t seed);
/// Plan for one image in one epoch; depends only on its arguments.
MaskPlan sample_mask_for(std::size_t num_patches, double mask_ratio, std::uint64_t seed, std::uint64_t epoch,
                         std::uint64_t sample_index);

/// Lightweight decoder: visible latents are projected to decoder width,
/// scattered back to their grid positions, masked positions are filled with
/// one shared mask token, and a linear layer predicts the pixels per patch.
template <typename T>
struct MaeDecoder {
  Linear<T> embed;
  Tensor<T> mask_token;  // [1 × Dd]
  Tensor<T> pos_embed;   // fixed, [(N + cls) × Dd]; class slot is zero
  std::vector<TransformerBlock<T>> blocks;
  LayerNormParams<T> norm;
  Linear<T> pred;

  static MaeDecoder init(const ModelConfig& config, std::uint64_t seed);
  void collect(ParameterSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct MaeOutput {
  Tensor<T> predicted;  // [B·N × P²C], every position
  Tensor<T> loss;       // scalar
  std::vector<MaskPlan> plans;
};

template <typename T>
struct MaeModel {
  VitEncoder<T> encoder;
  MaeDecoder<T> decoder;

  static MaeModel init(const ModelConfig& config, std::uint64_t seed);
  const ModelConfig& config() const { return encoder.config; }

  /// Encoder on the class token (when configured) plus visible patch tokens only.
  TokenSequence<T> encode_visible(const Tensor<T>& patches, const std::vector<MaskPlan>& plans,
                                  ForwardProbe<T>* probe = nullptr) const;
  /// Full-length decoder pass; returns [B·N × P²C] without the class slot.
  Tensor<T> decode_full(const TokenSequence<T>& latents, const std::vector<MaskPlan>& plans) const;
  MaeOutput<T> forward(const Tensor<T>& patches, const std::vector<MaskPlan>& plans) const;

  ParameterSet<T> parameters() const;
};

/// Mean over masked patches of the per-patch mean squared pixel error.
/// Zero (with a warning) when no patch is masked.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& predicted, const Tensor<T>& target, const std::vector<MaskPlan>& plans);

/// Visible patches from `original`, masked patches from `predicted` [N × P²C].
template <typename T>
Tensor<T> reconstruct_image(const Tensor<T>& original, const Tensor<T>& predicted, const MaskPlan& plan);

/// `original` with masked patches replaced by `sentinel`.
template <typename T>
Tensor<T> masked_input_image(const Tensor<T>& original, const MaskPlan& plan, std::size_t patch_size,
                             T sentinel = T(0.5));

}  // namespace vitmae
