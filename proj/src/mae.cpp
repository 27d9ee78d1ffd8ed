#include "vitmae/mae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitmae/errors.hpp"
#include "vitmae/log.hpp"

namespace vitmae {

std::vector<std::uint8_t> MaskPlan::mask_flags() const {
  std::vector<std::uint8_t> flags(num_patches, 0);
  for (auto k : masked) flags[k] = 1;
  return flags;
}

bool MaskPlan::is_masked(std::size_t k) const {
  return std::binary_search(masked.begin(), masked.end(), k);
}

std::size_t masked_count(std::size_t num_patches, double mask_ratio) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(mask_ratio));
  }
  // 100 × 0.29 evaluates to 28.999999999999996 in binary.
  const double product = static_cast<double>(num_patches) * mask_ratio;
  const auto m = static_cast<std::size_t>(std::floor(product + 1e-9));
  return std::min(m, num_patches);
}

MaskPlan sample_mask(std::size_t num_patches, double mask_ratio, Rng& rng) {
  const std::size_t m = masked_count(num_patches, mask_ratio);
  std::vector<std::size_t> perm(num_patches);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(num_patches - i));
    std::swap(perm[i], perm[j]);
  }
  MaskPlan plan;
  plan.num_patches = num_patches;
  plan.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  plan.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

MaskPlan sample_mask(std::size_t num_patches, double mask_ratio, std::uint64_t seed) {
  Rng rng(seed);
  auto plan = sample_mask(num_patches, mask_ratio, rng);
  plan.seed = seed;
  return plan;
}

MaskPlan sample_mask_for(std::size_t num_patches, double mask_ratio, std::uint64_t seed, std::uint64_t epoch,
                         std::uint64_t sample_index) {
  const std::uint64_t stream = derive_seed(seed, "mask", epoch * 0x100000000ULL + sample_index);
  return sample_mask(num_patches, mask_ratio, stream);
}

namespace {
template <typename T>
Tensor<T> fixed_table(const std::vector<double>& values, std::size_t rows, std::size_t cols) {
  return Tensor<T>({rows, cols}, std::vector<T>(values.begin(), values.end()));
}

void check_plans(const std::vector<MaskPlan>& plans, std::size_t num_patches) {
  if (plans.empty()) throw DimensionError("mask plans: empty batch");
  for (const auto& p : plans) {
    if (p.num_patches != num_patches || p.masked.size() + p.visible.size() != num_patches) {
      throw DimensionError("mask plan covers " + std::to_string(p.num_patches) + " patches, model has " +
                           std::to_string(num_patches));
    }
    if (p.visible.size() != plans.front().visible.size()) {
      throw DimensionError("mask plans in one batch must keep the same number of visible patches");
    }
  }
}
}  // namespace

template <typename T>
MaeDecoder<T> MaeDecoder<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto grid = PatchGrid::of(config);
  const std::size_t dd = config.decoder_width;
  MaeDecoder d;
  d.embed = Linear<T>::init(config.width, dd, seed, "decoder.embed");
  Rng rng(seed, "decoder.mask_token");
  std::vector<T> mask(dd);
  for (auto& v : mask) v = static_cast<T>(rng.truncated_normal(0.02));
  d.mask_token = Tensor<T>({1, dd}, std::move(mask));
  d.mask_token.set_requires_grad(true);
  auto table = sincos_position_table(dd, grid.grid_h(), grid.grid_w());
  if (config.pretrain_class_token) table.insert(table.begin(), dd, 0.0);
  d.pos_embed = fixed_table<T>(table, grid.count() + (config.pretrain_class_token ? 1 : 0), dd);
  for (std::size_t i = 0; i < config.decoder_layers; ++i) {
    d.blocks.push_back(TransformerBlock<T>::init(dd, config.decoder_heads, config.mlp_ratio, seed,
                                                 "decoder.blocks." + std::to_string(i)));
  }
  d.norm = LayerNormParams<T>::init(dd);
  d.pred = Linear<T>::init(dd, grid.patch_dim(), seed, "decoder.pred");
  return d;
}

template <typename T>
void MaeDecoder<T>::collect(ParameterSet<T>& set, const std::string& prefix) const {
  embed.collect(set, prefix + "embed");
  set.add(prefix + "mask_token", mask_token, false);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(set, prefix + "blocks." + std::to_string(i));
  norm.collect(set, prefix + "norm");
  pred.collect(set, prefix + "pred");
}

template <typename T>
MaeModel<T> MaeModel<T>::init(const ModelConfig& config, std::uint64_t seed) {
  return MaeModel{VitEncoder<T>::init(config, seed), MaeDecoder<T>::init(config, seed)};
}

template <typename T>
TokenSequence<T> MaeModel<T>::encode_visible(const Tensor<T>& patches, const std::vector<MaskPlan>& plans,
                                             ForwardProbe<T>* probe) const {
  const std::size_t n = config().num_patches();
  check_plans(plans, n);
  const std::size_t batch = plans.size();
  if (patches.rows() != batch * n) {
    throw DimensionError("encode_visible: " + std::to_string(batch) + " plans for patches " +
                         shape_string(patches.shape()));
  }
  std::vector<std::vector<std::size_t>> keep;
  keep.reserve(batch);
  for (const auto& p : plans) keep.push_back(p.visible);
  auto seq = encoder.select(encoder.project_patches(patches), batch, keep, config().pretrain_class_token);
  seq.tokens = encoder.encode(seq, probe);
  return seq;
}

template <typename T>
Tensor<T> MaeModel<T>::decode_full(const TokenSequence<T>& latents, const std::vector<MaskPlan>& plans) const {
  const std::size_t n = config().num_patches();
  check_plans(plans, n);
  const std::size_t batch = plans.size();
  const std::size_t cls = latents.has_class_token ? 1 : 0;
  const std::size_t lv = latents.length;
  if (latents.batch != batch || lv != plans.front().visible.size() + cls) {
    throw DimensionError("decode_full: latents do not match the mask plans");
  }
  const std::size_t full_len = n + cls;
  if (decoder.pos_embed.rows() != full_len) {
    throw DimensionError("decode_full: decoder positions built for a different class-token setting");
  }
  Tensor<T> x = decoder.embed(latents.tokens);
  // Row 0 of the concatenation is the mask token; latent rows follow.
  std::vector<std::size_t> index(batch * full_len, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = 1 + b * lv;
    std::size_t* row = index.data() + b * full_len;
    if (cls) row[0] = base;
    const auto& vis = plans[b].visible;
    for (std::size_t j = 0; j < vis.size(); ++j) row[cls + vis[j]] = base + cls + j;
  }
  Tensor<T> full = gather_rows(concat_rows<T>({decoder.mask_token, x}), index);
  full = add_rows_tiled(full, decoder.pos_embed);
  const double eps = config().layer_norm_eps;
  for (std::size_t i = 0; i < decoder.blocks.size(); ++i) {
    full = decoder.blocks[i].forward(full, batch, full_len, eps, "decoder.blocks." + std::to_string(i), nullptr);
  }
  Tensor<T> pixels = decoder.pred(decoder.norm(full, eps));
  if (!cls) return pixels;
  std::vector<std::size_t> patch_rows;
  patch_rows.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < n; ++k) patch_rows.push_back(b * full_len + 1 + k);
  return gather_rows(pixels, patch_rows);
}

template <typename T>
MaeOutput<T> MaeModel<T>::forward(const Tensor<T>& patches, const std::vector<MaskPlan>& plans) const {
  const auto latents = encode_visible(patches, plans);
  Tensor<T> predicted = decode_full(latents, plans);
  Tensor<T> loss = mae_loss(predicted, patches, plans);
  return MaeOutput<T>{predicted, loss, plans};
}

template <typename T>
ParameterSet<T> MaeModel<T>::parameters() const {
  ParameterSet<T> set = encoder.parameters("encoder.");
  decoder.collect(set, "decoder.");
  return set;
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& predicted, const Tensor<T>& target, const std::vector<MaskPlan>& plans) {
  if (plans.empty()) throw DimensionError("mae_loss: no mask plans");
  std::vector<std::uint8_t> flags;
  flags.reserve(predicted.rows());
  bool any = false;
  for (const auto& p : plans) {
    auto f = p.mask_flags();
    any = any || !p.masked.empty();
    flags.insert(flags.end(), f.begin(), f.end());
  }
  if (flags.size() != predicted.rows()) {
    throw DimensionError("mae_loss: plans cover " + std::to_string(flags.size()) + " patches, predictions have " +
                         std::to_string(predicted.rows()));
  }
  if (!any) log_warning("mae_loss: mask ratio 0 leaves nothing to reconstruct; loss is 0");
  return masked_mse(predicted, target, flags);
}

template <typename T>
Tensor<T> reconstruct_image(const Tensor<T>& original, const Tensor<T>& predicted, const MaskPlan& plan) {
  if (original.rank() != 3) throw DimensionError("reconstruct_image expects [H×W×C]");
  const std::size_t n = plan.num_patches;
  const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n || original.dim(0) % side != 0) {
    throw DimensionError("reconstruct_image: plan does not fit image " + shape_string(original.shape()));
  }
  const auto grid = PatchGrid::make(original.dim(0), original.dim(1), original.dim(0) / side, original.dim(2));
  auto patches = patchify(original, grid.patch_size);
  if (predicted.rows() != n || predicted.cols() != grid.patch_dim()) {
    throw DimensionError("reconstruct_image: predictions " + shape_string(predicted.shape()) +
                         " do not match the patch grid");
  }
  std::vector<T> merged(patches.data().begin(), patches.data().end());
  auto pred = predicted.data();
  const std::size_t d = grid.patch_dim();
  for (auto k : plan.masked) std::copy_n(pred.data() + k * d, d, merged.data() + k * d);
  return unpatchify(Tensor<T>({n, d}, std::move(merged)), grid);
}

template <typename T>
Tensor<T> masked_input_image(const Tensor<T>& original, const MaskPlan& plan, std::size_t patch_size, T sentinel) {
  if (original.rank() != 3) throw DimensionError("masked_input_image expects [H×W×C]");
  const auto grid = PatchGrid::make(original.dim(0), original.dim(1), patch_size, original.dim(2));
  if (grid.count() != plan.num_patches) throw DimensionError("masked_input_image: plan does not fit image");
  auto patches = patchify(original, patch_size);
  std::vector<T> values(patches.data().begin(), patches.data().end());
  const std::size_t d = grid.patch_dim();
  for (auto k : plan.masked) std::fill_n(values.data() + k * d, d, sentinel);
  return unpatchify(Tensor<T>({grid.count(), d}, std::move(values)), grid);
}

#define VITMAE_INSTANTIATE_MAE(T)                                                                        \
  template struct MaeDecoder<T>;                                                                         \
  template struct MaeModel<T>;                                                                           \
  template Tensor<T> mae_loss(const Tensor<T>&, const Tensor<T>&, const std::vector<MaskPlan>&);         \
  template Tensor<T> reconstruct_image(const Tensor<T>&, const Tensor<T>&, const MaskPlan&);             \
  template Tensor<T> masked_input_image(const Tensor<T>&, const MaskPlan&, std::size_t, T);

VITMAE_INSTANTIATE_MAE(float)
VITMAE_INSTANTIATE_MAE(double)

}  // namespace vitmae
