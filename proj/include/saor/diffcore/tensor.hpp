#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "saor/core/error.hpp"

namespace saor::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// One value in the computation graph. Non-leaf nodes carry the rule that
/// pushes their gradient into their parents.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor constant(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return BasicTensor(std::move(node));
  }

  /// Leaf tensor that accumulates gradients (a trainable parameter).
  static BasicTensor variable(Shape shape, std::vector<T> values) {
    auto t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static BasicTensor full(Shape shape, T fill) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<T>(n, fill));
  }
  static BasicTensor scalar(T v) { return constant({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.clear(); }

  /// Copy of the value with no graph history.
  BasicTensor detach() const { return constant(shape(), node_->value); }

  /// Direct write access for optimizers and checkpoint loading. Never used
  /// on nodes that are part of a recorded graph.
  std::span<T> mutable_values() const { return node_->value; }
  std::vector<T>& mutable_grad() const { return node_->grad_buffer(); }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;

/// Creates a non-leaf node. Parents and the backward rule are kept only when
/// some parent requires a gradient, so inference builds no graph.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

/// Topologically ordered list of graph nodes reachable from a root; inputs
/// precede the operations that consume them.
template <typename T>
class Tape {
 public:
  static Tape record(const BasicTensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node<T>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node<T>*> nodes_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed on every call.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const auto tape = Tape<T>::record(loss);
  for (Node<T>* node : tape.nodes()) {
    if (!node->is_leaf) node->grad.assign(node->value.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  const auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->is_leaf && node->backward_fn) node->backward_fn(*node);
  }
}

}  // namespace saor::ad
