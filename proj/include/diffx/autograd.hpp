#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffx/tensor.hpp"

namespace diffx {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for its lifetime (inference, sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of the dynamic computation graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(size_t i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient after backward(); zeros if the node received none.
  Tensor<T> grad() const {
    if (node_->grad.shape() != node_->value.shape()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Reverse-mode sweep from a scalar (numel 1) output.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar output, got " + shape_str(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.shape() == n->value.shape()) n->backward_fn(*n);
    }
    // Interior gradients are not needed after the sweep.
    for (Node<T>* n : order)
      if (n->backward_fn) n->grad = Tensor<T>();
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. `bw` receives the output node (with its grad filled)
/// and must accumulate into the parents' grad buffers; it is only recorded
/// when grad mode is on and some parent requires grad.
template <class T, class Backward>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, Backward&& bw) {
  Var<T> out(std::move(value));
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node());
  node.backward_fn = std::forward<Backward>(bw);
  return out;
}

/// Grad buffer of parent `i` if it takes part in the backward pass.
template <class T>
Tensor<T>* parent_grad(Node<T>& n, size_t i) {
  auto& p = *n.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

template <class T>
const Tensor<T>& parent_value(const Node<T>& n, size_t i) {
  return n.parents[i]->value;
}

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

template <class T>
Var<T> parameter(Tensor<T> t) {
  return Var<T>(std::move(t), true);
}

}  // namespace diffx
