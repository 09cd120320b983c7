// Dense double-precision tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto an immutable node. Operations in ops.hpp
// create new nodes that remember their parents and a local gradient rule;
// backward() walks the recorded graph from a scalar loss. The graph is
// implicit in the parent links, so a fresh tape exists for every forward pass
// and is released together with the last handle referencing it.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace airformer {

using Shape = std::vector<std::size_t>;

/// Thrown when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for invalid hyperparameters, layer stacks or run settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller breaks an API precondition (e.g. non-scalar loss).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  [[nodiscard]] bool is_leaf() const { return !backward_fn; }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// RAII guard that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (std::size_t extent : shape) {
      if (extent == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             to_string(shape));
      }
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0),
                  requires_grad);
  }
  static Tensor full(Shape shape, double fill) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, fill));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  /// Builds the output node of an operation. Recording happens only when
  /// grad mode is on and some parent takes part in differentiation.
  static Tensor from_op(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any && grad_enabled()) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const {
    return node_->shape.at(axis);
  }

  [[nodiscard]] std::span<const double> values() const { return node_->value; }
  [[nodiscard]] double operator[](std::size_t i) const {
    return node_->value[i];
  }
  [[nodiscard]] double item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
  }

  [[nodiscard]] bool requires_grad() const {
    return node_ && node_->requires_grad;
  }
  [[nodiscard]] bool has_grad() const {
    return node_->grad.size() == node_->value.size();
  }
  /// Gradient after backward(); zeros if nothing has flowed in yet.
  [[nodiscard]] std::vector<double> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<double>(size(), 0.0);
  }
  [[nodiscard]] std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// In-place access for leaves only (parameter updates, checkpoint loads).
  [[nodiscard]] std::span<double> mutable_values() {
    if (!node_->is_leaf()) {
      throw ContractError("only leaf tensors may be modified in place");
    }
    return node_->value;
  }

  /// Same values, cut from the graph.
  [[nodiscard]] Tensor detach() const {
    return Tensor(node_->shape, node_->value);
  }

  [[nodiscard]] const detail::Node* id() const { return node_.get(); }
  [[nodiscard]] detail::Node& node() const { return *node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Interior gradients are reset at the
/// start of every call; leaves accumulate, so calling twice without zeroing
/// doubles parameter gradients. Returns the number of nodes visited.
inline std::size_t backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : "<none>"));
  }
  if (!loss.requires_grad()) return 0;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
  }
  detail::Node& root = loss.node();
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
  return order.size();
}

}  // namespace airformer
