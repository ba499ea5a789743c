#pragma once

#include <cmath>
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

#include "dmad/errors.hpp"

namespace dmad {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<Scalar>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime. Teacher-side quantities are
/// computed under this guard so they enter the losses as constants.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node,
/// which is how parameters stay connected to the graphs built from them.
template <typename Scalar>
class Tensor {
 public:
  using NodeType = detail::Node<Scalar>;
  using value_type = Scalar;

  Tensor() : node_(std::make_shared<NodeType>()) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : node_(std::make_shared<NodeType>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<NodeType>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<Scalar> data() { return node_->value; }
  std::span<const Scalar> data() const { return node_->value; }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  Scalar operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<Scalar> grad() { return node_->grad; }
  std::span<const Scalar> grad() const { return node_->grad; }

  /// Allocates a zero gradient (so an unused parameter still reports one).
  void zero_grad() { node_->grad.assign(node_->value.size(), Scalar(0)); }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  /// Fresh leaf holding a copy of the values; no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  /// Deep copy that keeps the requires_grad flag but not the history.
  Tensor clone() const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad());
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  NodeType& node() { return *node_; }
  const NodeType& node() const { return *node_; }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

  /// Builds an op result. Graph edges are recorded only when grad mode is on
  /// and some parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<Scalar> values,
                            std::vector<Tensor> parents,
                            std::function<void(NodeType&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  std::shared_ptr<NodeType> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaves accumulate into their grad;
/// intermediate grads are released once consumed.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  using NodeType = detail::Node<Scalar>;
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; reversed it is a topological order.
  std::vector<NodeType*> order;
  std::unordered_set<const NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack;
  auto* root = const_cast<NodeType*>(&loss.node());
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    if (next_parent < node->parents.size()) {
      NodeType* parent = node->parents[next_parent++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (!node->backward_fn) continue;  // leaf
    if (node->grad.empty()) continue;
    node->backward_fn(*node);
    if (node != root) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename Scalar>
bool all_finite(std::span<const Scalar> values) {
  for (Scalar v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// Converts between scalar types; the result is a leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  Tensor<To> out(t.shape(), std::move(values));
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace dmad
