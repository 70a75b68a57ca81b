#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tcaf/errors.hpp"

namespace tcaf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Train/eval switch shared by dropout, batch norm and trimming.
enum class Mode { train, eval };

/// NaN/Inf guard over every primitive output. On by default in debug builds.
bool nan_guard_enabled();
void set_nan_guard(bool enabled);

/// Graph recording for the current thread. Off inside a NoGradGuard scope.
bool grad_enabled();
void set_grad_enabled(bool enabled);

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array that records the operations producing it so that
/// `backward` can replay them in reverse. Copies share the underlying node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T fill) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill));
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : (rank() == 1 ? 1 : numel()); }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  /// Writable values; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  T item() const {
    if (numel() != 1) throw DimensionError("item(): tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }
  T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
  T at(std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->parents.empty() && !node_->backward; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }
  const char* op_name() const { return node_->op; }

  /// Value copy with no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  if (nan_guard_enabled()) {
    for (const T& v : values) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite value produced by '") + op + "' " + shape_str(shape));
      }
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled())
    for (const auto& p : parents) needs_grad = needs_grad || p->requires_grad;
  if (needs_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor with requires_grad; intermediate buffers and closures are
/// released afterwards, so a graph can be walked only once.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  auto root = loss.node();
  if (root->consumed) throw Error("backward: graph already consumed");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (NodeT* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->consumed = true;
    }
  }
}

}  // namespace tcaf
