#pragma once

#include <algorithm>
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

#include "cdformer/error.hpp"

namespace cdformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the recorded computation. Values are fixed once the node is
// built; only `grad` is written afterwards (and `value` for optimizer-owned
// leaves).
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major array of doubles that records the operations producing it.
// Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return matrix(n, n, std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const {
    return rank() == 2 ? node_->shape[1] : (rank() == 1 ? node_->shape[0] : 1);
  }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Gradient after backward(); zeros if nothing reached this tensor.
  std::vector<double> grad() const {
    if (node_->grad.size() != node_->value.size()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() const { node_->grad.clear(); }

  // Writable storage for optimizer updates and checkpoint loading. Only
  // meaningful on leaves.
  std::span<double> mutable_values() const { return node_->value; }

  // Reverse pass from a single-element tensor.
  void backward() const;

  // New leaf with the same values and no history.
  Tensor detach() const { return from(shape(), to_vector()); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds a result tensor; the backward closure is kept only when some input
// participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient sink for parent i, or nullptr if it is not differentiable.
inline std::vector<double>* parent_grad(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() requires a single-element tensor, got " + shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS for a topological ordering.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

}  // namespace cdformer
