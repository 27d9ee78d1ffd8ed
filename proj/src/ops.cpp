#include "vitmae/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vitmae/errors.hpp"

namespace vitmae {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void check_finite(const Buffer<T>& values, const char* op) {
  if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(values.data(), static_cast<Eigen::Index>(values.size()))
           .allFinite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
}

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the output tensor, recording `backward` only when some input needs it.
template <typename T, typename Fn>
Tensor<T> make_result(Shape shape, Buffer<T> values, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  if (wants_grad<T>(inputs)) {
    node->requires_grad = true;
    for (auto* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::forward<Fn>(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
ConstMatMap<T> as_matrix(const Node<T>& n, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(n.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> grad_matrix(Node<T>& n, std::size_t rows, std::size_t cols) {
  return MatMap<T>(n.ensure_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename T>
void require_rank2(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  Buffer<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() = as_matrix(*a.node(), m, k) * as_matrix(*b.node(), k, n);
  return make_result<T>({m, n}, std::move(out), "matmul", {&a, &b}, [m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.data(), m, n);
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad) grad_matrix(an, m, k).noalias() += g * as_matrix(bn, k, n).transpose();
    if (bn.requires_grad) grad_matrix(bn, k, n).noalias() += as_matrix(an, m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank2(weight, "linear");
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  if (x.cols() != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t r = x.rows();
  Buffer<T> out(r * out_dim);
  MatMap<T> y(out.data(), r, out_dim);
  y.noalias() = as_matrix(*x.node(), r, in) * as_matrix(*weight.node(), in, out_dim);
  y.rowwise() += as_matrix(*bias.node(), 1, out_dim).row(0);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return make_result<T>(std::move(shape), std::move(out), "linear", {&x, &weight, &bias},
                        [r, in, out_dim](Node<T>& self) {
                          ConstMatMap<T> g(self.grad.data(), r, out_dim);
                          auto& xn = *self.inputs[0];
                          auto& wn = *self.inputs[1];
                          auto& bn = *self.inputs[2];
                          if (xn.requires_grad)
                            grad_matrix(xn, r, in).noalias() += g * as_matrix(wn, in, out_dim).transpose();
                          if (wn.requires_grad)
                            grad_matrix(wn, in, out_dim).noalias() += as_matrix(xn, r, in).transpose() * g;
                          if (bn.requires_grad) grad_matrix(bn, 1, out_dim) += g.colwise().sum();
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto ad = a.data(), bd = b.data();
  Buffer<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto ad = a.data(), bd = b.data();
  Buffer<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {&a, &b}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data(), bd = b.data();
  Buffer<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.data[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto xd = x.data();
  Buffer<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return make_result<T>(x.shape(), std::move(out), "scale", {&x}, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, "sum", {&x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  using Array = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Column = Eigen::Array<T, Eigen::Dynamic, 1>;
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: feature size " + std::to_string(d) + " vs gamma " +
                         shape_string(gamma.shape()) + ", beta " + shape_string(beta.shape()));
  }
  const auto r = static_cast<Eigen::Index>(x.rows());
  const auto n = static_cast<Eigen::Index>(d);
  Eigen::Map<const Array> xv(x.data().data(), r, n);
  Eigen::Map<const Row> g(gamma.data().data(), n);
  Eigen::Map<const Row> b(beta.data().data(), n);
  // xhat and 1/std are kept for the backward pass.
  auto xhat = std::make_shared<Array>(xv.colwise() - xv.rowwise().mean());
  auto rstd = std::make_shared<Column>((xhat->square().rowwise().mean() + eps).rsqrt());
  xhat->colwise() *= *rstd;
  Buffer<T> out(x.numel());
  Eigen::Map<Array>(out.data(), r, n) = (xhat->rowwise() * g).rowwise() + b;
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
                        [r, n, xhat, rstd](Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          auto& gn = *self.inputs[1];
                          auto& bn = *self.inputs[2];
                          Eigen::Map<const Array> dy(self.grad.data(), r, n);
                          if (gn.requires_grad)
                            Eigen::Map<Row>(gn.ensure_grad().data(), n) += (dy * *xhat).colwise().sum();
                          if (bn.requires_grad) Eigen::Map<Row>(bn.ensure_grad().data(), n) += dy.colwise().sum();
                          if (!xn.requires_grad) return;
                          const Array gh = dy.rowwise() * Eigen::Map<const Row>(gn.data.data(), n);
                          const Column mean_g = gh.rowwise().mean();
                          const Column mean_gx = (gh * *xhat).rowwise().mean();
                          Eigen::Map<Array>(xn.ensure_grad().data(), r, n) +=
                              ((gh.colwise() - mean_g) - xhat->colwise() * mean_gx).colwise() * *rstd;
                        });
}

namespace {
template <typename T>
void softmax_rows(const T* in, T* out, std::size_t rows, std::size_t n) {
  using Array = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Array> x(in, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  Eigen::Map<Array> y(out, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  // `in` and `out` may alias; reductions are materialized before writing.
  const Eigen::Array<T, Eigen::Dynamic, 1> peak = x.rowwise().maxCoeff();
  y = (x.colwise() - peak).exp();
  const Eigen::Array<T, Eigen::Dynamic, 1> total = y.rowwise().sum();
  y.colwise() /= total;
}

// dx = y ⊙ (dy − ⟨dy, y⟩) per row.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * y[i * n + j];
    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot);
  }
}
}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.cols(), r = x.rows();
  Buffer<T> out(x.numel());
  softmax_rows(x.data().data(), out.data(), r, n);
  return make_result<T>(x.shape(), std::move(out), "softmax", {&x}, [r, n](Node<T>& self) {
    softmax_rows_backward(self.data.data(), self.grad.data(), self.inputs[0]->ensure_grad().data(), r, n);
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ConstArrayMap = Eigen::Map<const Array>;
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Buffer<T> out(x.numel());
  ConstArrayMap xv(x.data().data(), n);
  Eigen::Map<Array>(out.data(), n) = T(0.5) * xv * (T(1) + (xv * inv_sqrt2).erf());
  return make_result<T>(x.shape(), std::move(out), "gelu", {&x}, [inv_sqrt2, n](Node<T>& self) {
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    auto& xn = *self.inputs[0];
    ConstArrayMap v(xn.data.data(), n);
    ConstArrayMap dy(self.grad.data(), n);
    // d/dx x·Φ(x) = Φ(x) + x·φ(x)
    Eigen::Map<Array>(xn.ensure_grad().data(), n) +=
        dy * (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) + v * inv_sqrt_2pi * (T(-0.5) * v.square()).exp());
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Buffer<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), "reshape", {&x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Buffer<T> out(m * n);
  MatMap<T>(out.data(), n, m) = as_matrix(*x.node(), m, n).transpose();
  return make_result<T>({n, m}, std::move(out), "transpose", {&x}, [m, n](Node<T>& self) {
    grad_matrix(*self.inputs[0], m, n) += ConstMatMap<T>(self.grad.data(), n, m).transpose();
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols(), r = x.rows();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  Buffer<T> out(r * w);
  auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xd.data() + i * n + begin, w, out.data() + i * w);
  Shape shape = x.shape();
  shape.back() = w;
  return make_result<T>(std::move(shape), std::move(out), "slice_cols", {&x}, [r, n, w, begin](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  const std::size_t d = x.cols(), r = x.rows();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Buffer<T> out(index.size() * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    std::copy_n(xd.data() + index[i] * d, d, out.data() + i * d);
  }
  return make_result<T>({index.size(), d}, std::move(out), "gather_rows", {&x}, [index, d](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i) {
      T* dst = g.data() + index[i] * d;
      const T* src = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    total += p.rows();
  }
  Buffer<T> out;
  out.reserve(total * d);
  bool grad = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    grad = grad || p.requires_grad();
  }
  check_finite(out, "concat_rows");
  auto node = std::make_shared<Node<T>>();
  node->shape = {total, d};
  node->data = std::move(out);
  node->op = "concat_rows";
  if (grad && GradMode::enabled()) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.node_ptr());
    node->backward = [](Node<T>& self) {
      std::size_t offset = 0;
      for (auto& in : self.inputs) {
        const std::size_t n = in->data.size();
        if (in->requires_grad) {
          auto& g = in->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> add_rows_tiled(const Tensor<T>& x, const Tensor<T>& table) {
  const std::size_t d = x.cols(), r = x.rows(), k = table.rows();
  if (table.cols() != d || r % k != 0) {
    throw DimensionError("add_rows_tiled: cannot tile " + shape_string(table.shape()) + " over " +
                         shape_string(x.shape()));
  }
  auto xd = x.data(), td = table.data();
  Buffer<T> out(r * d);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t t = (i % k) * d;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xd[i * d + j] + td[t + j];
  }
  return make_result<T>(x.shape(), std::move(out), "add_rows_tiled", {&x, &table}, [r, k, d](Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const std::size_t t = (i % k) * d;
        for (std::size_t j = 0; j < d; ++j) g[t + j] += self.grad[i * d + j];
      }
    }
  });
}

template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq_len,
                              std::size_t heads, std::vector<T>* probabilities) {
  const std::size_t width3 = qkv.cols();
  if (width3 % 3 != 0 || qkv.rows() != batch * seq_len) {
    throw DimensionError("multihead_attention: packed input " + shape_string(qkv.shape()) +
                         " does not match batch " + std::to_string(batch) + " × length " +
                         std::to_string(seq_len));
  }
  const std::size_t width = width3 / 3;
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("multihead_attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t hd = width / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width3));
  const auto out_stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
  const Eigen::Index L = static_cast<Eigen::Index>(seq_len), H = static_cast<Eigen::Index>(hd);

  auto probs = std::make_shared<Buffer<T>>(batch * heads * seq_len * seq_len);
  Buffer<T> out(batch * seq_len * width);
  const T* src = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = src + b * seq_len * width3 + h * hd;
      ConstStridedMap<T> q(base, L, H, stride);
      ConstStridedMap<T> k(base + width, L, H, stride);
      ConstStridedMap<T> v(base + 2 * width, L, H, stride);
      T* p_ptr = probs->data() + (b * heads + h) * seq_len * seq_len;
      MatMap<T> p(p_ptr, L, L);
      p.noalias() = (q * k.transpose()) * inv_scale;
      softmax_rows(p_ptr, p_ptr, seq_len, seq_len);
      StridedMap<T> o(out.data() + b * seq_len * width + h * hd, L, H, out_stride);
      o.noalias() = p * v;
    }
  }
  if (probabilities) probabilities->assign(probs->begin(), probs->end());
  return make_result<T>(
      {batch * seq_len, width}, std::move(out), "multihead_attention", {&qkv},
      [=](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& gin = in.ensure_grad();
        RowMat<T> dp(L, L), ds(L, L);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq_len * width3 + h * hd;
            ConstStridedMap<T> q(in.data.data() + off, L, H, stride);
            ConstStridedMap<T> k(in.data.data() + off + width, L, H, stride);
            ConstStridedMap<T> v(in.data.data() + off + 2 * width, L, H, stride);
            StridedMap<T> dq(gin.data() + off, L, H, stride);
            StridedMap<T> dk(gin.data() + off + width, L, H, stride);
            StridedMap<T> dv(gin.data() + off + 2 * width, L, H, stride);
            ConstStridedMap<T> dout(self.grad.data() + b * seq_len * width + h * hd, L, H, out_stride);
            const T* p_ptr = probs->data() + (b * heads + h) * seq_len * seq_len;
            ConstMatMap<T> p(p_ptr, L, L);
            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * v.transpose();
            ds.setZero();
            softmax_rows_backward(p_ptr, dp.data(), ds.data(), seq_len, seq_len);
            ds *= inv_scale;
            dq.noalias() += ds * k;
            dk.noalias() += ds.transpose() * q;
          }
        }
      });
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& predicted, const Tensor<T>& target,
                     const std::vector<std::uint8_t>& row_mask) {
  require_same_shape(predicted, target, "masked_mse");
  const std::size_t r = predicted.rows(), c = predicted.cols();
  if (row_mask.size() != r) {
    throw DimensionError("masked_mse: mask has " + std::to_string(row_mask.size()) + " rows, predictions " +
                         std::to_string(r));
  }
  const std::size_t flagged = static_cast<std::size_t>(std::count_if(row_mask.begin(), row_mask.end(),
                                                                     [](std::uint8_t m) { return m != 0; }));
  auto pd = predicted.data(), td = target.data();
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!row_mask[i]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const T e = pd[i * c + j] - td[i * c + j];
      total += e * e;
    }
  }
  const T denom = flagged ? static_cast<T>(flagged * c) : T(1);
  return make_result<T>({1}, {total / denom}, "masked_mse", {&predicted, &target},
                        [row_mask, r, c, denom](Node<T>& self) {
                          auto& pn = *self.inputs[0];
                          auto& tn = *self.inputs[1];
                          const T k = T(2) * self.grad[0] / denom;
                          for (std::size_t i = 0; i < r; ++i) {
                            if (!row_mask[i]) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                              const std::size_t idx = i * c + j;
                              const T e = k * (pn.data[idx] - tn.data[idx]);
                              if (pn.requires_grad) pn.ensure_grad()[idx] += e;
                              if (tn.requires_grad) tn.ensure_grad()[idx] -= e;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& predicted, const Tensor<T>& target) {
  return masked_mse(predicted, target, std::vector<std::uint8_t>(predicted.rows(), 1));
}

#define VITMAE_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);              \
  template Tensor<T> softmax(const Tensor<T>&);                                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> transpose(const Tensor<T>&);                                                      \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                           \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                       \
  template Tensor<T> add_rows_tiled(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> multihead_attention(const Tensor<T>&, std::size_t, std::size_t, std::size_t,      \
                                         std::vector<T>*);                                             \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&, const std::vector<std::uint8_t>&); \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

VITMAE_INSTANTIATE_OPS(float)
VITMAE_INSTANTIATE_OPS(double)

}  // namespace vitmae
