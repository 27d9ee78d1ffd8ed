#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace vitmae {

using Shape = std::vector<std::size_t>;

/// Tensor storage, aligned so vectorized kernels take the same path for every buffer.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Storage plus autodiff bookkeeping for one tensor value.
///
/// `backward` reads `grad` of this node and accumulates into the grads of
/// `inputs`. Leaves have no backward function.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr<T>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  Buffer<T>& ensure_grad();
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle; copies share the same node. Values are not
/// modified by ops, but parameters are updated in place by optimizers through
/// `mutable_data()`.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);
  Tensor(Shape shape, Buffer<T> values);
  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), Buffer<T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }
  static Tensor from_node(NodePtr<T> node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  /// Leading dimensions collapsed: rows × last-axis size.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Value copy without graph history.
  Tensor detach() const;
  /// Reverse pass from this scalar. Leaf grads accumulate across calls.
  void backward() const;

  Node<T>* node() const { return node_.get(); }
  const NodePtr<T>& node_ptr() const { return node_; }

 private:
  NodePtr<T> node_;
};

/// Topologically ordered list of recorded nodes reachable from a root.
///
/// Every node appears after all nodes that produce its inputs. Only nodes
/// that require gradients are recorded.
template <typename T>
class ComputationRecord {
 public:
  explicit ComputationRecord(const Tensor<T>& root);

  const std::vector<Node<T>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Runs the chain rule in reverse order. `root` must be a scalar.
  void run_backward();

 private:
  std::vector<Node<T>*> order_;
};

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

/// Disables graph recording for the current thread within a scope.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputationRecord<float>;
extern template class ComputationRecord<double>;

}  // namespace vitmae
