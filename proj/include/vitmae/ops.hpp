#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitmae/tensor.hpp"

// Differentiable primitives. 2-D ops treat any tensor as rows × last axis.
namespace vitmae {

/// a[m×k] · b[k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[r×in] · weight[in×out] + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Normalizes each row over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Row-wise softmax over the last axis (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Exact erf form: x·Φ(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// 2-D transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

/// Columns [begin, end) of a rows × cols tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// out[i] = x[index[i]]; indices may repeat (gradients scatter-add).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index);

/// Stacks row blocks vertically. All parts share the last-axis size.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

/// out[r] = x[r] + table[r mod table_rows].
template <typename T>
Tensor<T> add_rows_tiled(const Tensor<T>& x, const Tensor<T>& table);

/// Multi-head self-attention core on packed projections.
///
/// `qkv` is [batch·seq_len × 3·width] holding Q|K|V per token; heads split the
/// width evenly. Returns the concatenated head outputs [batch·seq_len × width].
/// When `probabilities` is non-null it receives the attention weights laid out
/// as [batch][head][query][key].
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq_len,
                              std::size_t heads, std::vector<T>* probabilities = nullptr);

/// Mean squared error over the rows flagged in `row_mask`, averaged over
/// flagged rows and columns. Unflagged rows get exactly zero gradient.
/// Returns 0 when no row is flagged.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& predicted, const Tensor<T>& target,
                     const std::vector<std::uint8_t>& row_mask);

template <typename T>
Tensor<T> mse(const Tensor<T>& predicted, const Tensor<T>& target);

}  // namespace vitmae
