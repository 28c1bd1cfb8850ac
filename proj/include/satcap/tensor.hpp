#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "satcap/errors.hpp"

namespace satcap {

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// One vertex of the dynamically recorded tape. Non-leaf nodes own references to
// their inputs and a closure that pushes the output gradient into them.
template <class T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                           std::to_string(numel_of(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<T>>(std::move(values));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto count = numel_of(shape);
    return from(std::move(shape), std::vector<T>(count, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto count = numel_of(shape);
    return from(std::move(shape), std::vector<T>(count, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("dim: axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
  }
  std::size_t numel() const { return node_->data->size(); }

  std::span<const T> data() const { return *node_->data; }
  // In-place access for initializers, optimizers, and finite-difference probes.
  std::span<T> mutable_data() { return *node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return (*node_->data)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Same buffer, no tape history.
  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
  }
  Tensor clone() const { return from(shape(), std::vector<T>(data().begin(), data().end())); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*node_->data)[i]);
    return Tensor<U>::from(shape(), std::move(out));
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  bool same_as(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds an op output. The closure is attached only when some input needs a
// gradient and recording is enabled.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::make_shared<std::vector<T>>(std::move(values));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    n->requires_grad = true;
    n->leaf = false;
    for (auto& in : inputs) {
      if (in.defined()) n->parents.push_back(in.ptr());
    }
    n->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(n));
}

// Gradient sink for an input, or nullptr when it does not participate.
template <class T>
T* grad_of(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer().data();
}

}  // namespace detail

// Reverse sweep from a scalar loss. Leaf gradients accumulate; the recorded
// graph is released afterwards so the same loss cannot be replayed.
template <class T>
void backward(const Tensor<T>& loss) {
  Node<T>* root = loss.node();
  if (!root) throw ContractError("backward: undefined loss tensor");
  if (root->data->size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(root->shape));
  }
  if (root->consumed) {
    throw ContractError("backward: stale tape; run the forward pass again before calling backward");
  }
  if (!root->requires_grad) throw ContractError("backward: tape is empty; loss depends on no parameter");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !p->leaf && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (n->leaf) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

}  // namespace satcap
