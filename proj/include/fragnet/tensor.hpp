#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fragnet/error.hpp"

namespace fragnet {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// When disabled, ops produce plain tensors with no graph attached.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool previous;
  NoGradGuard() : previous(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = previous; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

// One value in the computation graph: a buffer plus the link to whatever
// produced it. backward_fn reads this node's grad and accumulates into the
// grads of its inputs; saved context (pooling argmax, batch statistics, ...)
// lives in the closure.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  // Empty data vector means zero-initialized.
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    auto n = shape_numel(shape);
    if (data.empty()) data.assign(static_cast<std::size_t>(n), T(0));
    if (static_cast<std::int64_t>(data.size()) != n) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::move(data);
    node->requires_grad = requires_grad;
    node->is_leaf = true;
    return Tensor(std::move(node));
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return check()->shape; }
  int dim(std::size_t i) const { return check()->shape.at(i); }
  std::size_t rank() const { return check()->shape.size(); }
  std::int64_t numel() const { return check()->numel(); }
  bool requires_grad() const { return check()->requires_grad; }
  bool is_leaf() const { return check()->is_leaf; }
  const char* op() const { return check()->op; }

  void set_requires_grad(bool on) {
    if (!check()->is_leaf) throw Error("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }

  std::span<T> values() { return {check()->values.data(), check()->values.size()}; }
  std::span<const T> values() const { return {check()->values.data(), check()->values.size()}; }

  bool has_grad() const { return check()->grad.size() == node_->values.size(); }
  std::span<T> grad() {
    if (!has_grad()) throw Error(std::string("tensor has no gradient (op: ") + op() + ")");
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<const T> grad() const { return const_cast<Tensor*>(this)->grad(); }

  void zero_grad() {
    check()->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::int64_t offset(std::initializer_list<int> idx) const {
    const Shape& s = check()->shape;
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    std::int64_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[k]) {
        throw ShapeError("index " + std::to_string(i) + " out of bounds for dim " +
                         std::to_string(k) + " of " + shape_str(s));
      }
      off = off * s[k] + i;
      ++k;
    }
    return off;
  }

  T at(std::initializer_list<int> idx) const { return node_->values[offset(idx)]; }
  void set(std::initializer_list<int> idx, T v) { check()->values[offset(idx)] = v; }

  // Copies values into a fresh leaf with no graph attached.
  Tensor detach() const {
    return from_data(check()->shape, std::vector<T>(node_->values), false);
  }

  void throw_if_not_finite(const std::string& what) const {
    for (T v : check()->values) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("non-finite value in " + what);
      }
    }
  }

  // Reverse-mode sweep from a scalar. Visits each reachable node exactly once
  // in reverse topological order; gradients of repeated inputs accumulate.
  void backward() {
    Node* root = check().get();
    if (root->numel() != 1) {
      throw Error("backward requires a scalar, got shape " + shape_str(root->shape));
    }
    if (!root->requires_grad) {
      throw Error("backward called on a tensor that does not require gradients");
    }
    std::vector<Node*> order = topo_order(root);
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn) {
        for (auto& in : n->inputs) {
          if (in->requires_grad) in->ensure_grad();
        }
        n->backward_fn(*n);
      }
      if (!n->is_leaf) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  const std::shared_ptr<Node>& check() const {
    if (!node_) throw Error("operation on an empty tensor");
    return node_;
  }

  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

// Builds an op-result node. Inputs that require gradients are recorded for the
// backward sweep; backward_fn is attached only when the result tracks them.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> values,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(detail::Node<T>&)> backward_fn) {
  auto n = shape_numel(shape);
  if (values.empty()) values.assign(static_cast<std::size_t>(n), T(0));
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError(std::string(op) + ": result buffer does not match shape");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) {
      if (in.valid() && in.requires_grad()) track = true;
    }
  }
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& in : inputs) {
      if (in.valid() && in.requires_grad()) node->inputs.push_back(in.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace fragnet
