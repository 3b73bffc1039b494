#pragma once

// Dense tensor with reverse-mode differentiation.
//
// A Tensor is a shared handle onto a Node holding shape, row-major data and an
// optional gradient buffer. Operations (ops.hpp) produce new nodes; when grad
// mode is on and any input requires a gradient, the result records its parents
// and a backward closure. Tensor<double> is the verification precision and
// Tensor<float> the training precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "coca/numeric/errors.hpp"
#include "coca/numeric/scope.hpp"

namespace coca {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
// Fault injection for verifying the gradient oracle: gradients flowing back
// through ops whose name matches are scaled by `factor`.
struct BackwardFault {
  std::string op;
  double factor = 1.0;
};
inline BackwardFault& backward_fault() {
  thread_local BackwardFault fault;
  return fault;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Corrupts the backward pass of one op kind while alive. Test fixture only.
class BackwardFaultGuard {
 public:
  BackwardFaultGuard(std::string op, double factor) : previous_(detail::backward_fault()) {
    detail::backward_fault() = {std::move(op), factor};
  }
  ~BackwardFaultGuard() { detail::backward_fault() = previous_; }
  BackwardFaultGuard(const BackwardFaultGuard&) = delete;
  BackwardFaultGuard& operator=(const BackwardFaultGuard&) = delete;

 private:
  detail::BackwardFault previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (coca::numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + coca::to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = coca::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Extent of axis `axis`; negative values count from the back.
  std::size_t dim(int axis) const {
    int r = static_cast<int>(rank());
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis out of range for shape " + coca::to_string(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Only for parameter updates, loading and probes; the
  /// tape does not see these writes.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + coca::to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span when nothing has flowed into this tensor.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  const std::string& op() const { return node_->op; }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  /// New leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), vec(), false); }
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), vec(), requires_grad); }

  /// Reverse sweep from this scalar. Intermediate gradients are reset first;
  /// leaf gradients accumulate across calls until zero_grad().
  void backward() const {
    if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + coca::to_string(shape()));
    auto order = topo_order();
    for (auto* n : order)
      if (n->backward_fn) n->grad.clear();
    node_->ensure_grad()[0] += T(1);
    const auto& fault = detail::backward_fault();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (!n->backward_fn || n->grad.empty()) continue;
      if (!fault.op.empty() && n->op == fault.op)
        for (auto& g : n->grad) g = static_cast<T>(g * fault.factor);
      n->backward_fn(*n);
    }
  }

 private:
  std::vector<Node<T>*> topo_order() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;  // parents before children
  }

  NodePtr node_;
};

namespace detail {

template <class T>
void check_finite(const std::string& op, const std::vector<T>& v) {
  for (const T& x : v) {
    if (!std::isfinite(x)) {
      auto where = current_scope();
      throw NonFiniteError("non-finite value produced by " + op +
                           (where.empty() ? std::string() : " in layer " + where));
    }
  }
}

/// Wraps freshly computed data as an op result and wires up the tape.
template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const Node<T>&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  if (grad_enabled()) {
    for (const auto* in : inputs)
      if (in->requires_grad()) node->requires_grad = true;
    if (node->requires_grad) {
      for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(const Node<T>&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  if (grad_enabled()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) node->requires_grad = true;
    if (node->requires_grad) {
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail
}  // namespace coca
