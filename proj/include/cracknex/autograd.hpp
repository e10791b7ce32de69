#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cracknex/tensor.hpp"

namespace cracknex {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the gradient of this node and accumulates into parents.
  std::function<void(const Tensor<T>&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (!grad.same_shape(value)) {
      grad = Tensor<T>(value.channels(), value.height(), value.width());
    }
    return grad;
  }
};

/// Handle to a value in a dynamically recorded computation graph.
///
/// Copies share the same node, so a parameter handed to two forward paths is
/// literally the same object and receives the summed gradient of both.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Tensor<T>& value() const& { return node_->value; }
  // A temporary Var may hold the last reference to its node, so hand out a copy.
  Tensor<T> value() && { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }

  /// Gradient buffer, zero-initialised on first access.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad_buffer().fill(T(0)); }

  int channels() const { return node_->value.channels(); }
  int height() const { return node_->value.height(); }
  int width() const { return node_->value.width(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op node. `backward` is only retained when some parent needs a
/// gradient, so constant-only subgraphs cost nothing on the backward pass.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(const Tensor<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Var<T>(std::move(n));
}

/// Accumulates `g` into the gradient of `target` if it is differentiable.
template <typename T>
void accumulate(Var<T>& target, const Tensor<T>& g) {
  if (!target.requires_grad()) return;
  auto& buf = target.mutable_grad();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

/// Reverse-mode sweep from a scalar root.
template <typename T>
void backward(Var<T>& root) {
  require(root.value().size() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; deep graphs would overflow a recursive walk.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.mutable_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(n->grad_buffer());
  }
}

}  // namespace cracknex
