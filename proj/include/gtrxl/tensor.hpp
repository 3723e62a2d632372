#pragma once

// Dense double-precision tensor with reverse-mode autodiff.
//
// A Tensor is a cheap handle to a graph node. Operations that see at least one
// input with requires_grad (and grad mode enabled) record their inputs and a
// backward closure on the output node; backward() topologically orders the
// reachable nodes into a Tape and replays the closures in reverse.

#include <algorithm>
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

namespace gtrxl {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
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

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == no gradient
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  double* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

inline thread_local bool grad_mode = true;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(gtrxl::numel(shape), 0.0);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(gtrxl::numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (gtrxl::numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(gtrxl::numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t row, std::size_t col) const {
    return node_->data[row * node_->shape.back() + col];
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Gradient as a fresh constant tensor; zeros when absent.
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return from(shape(), node_->grad);
  }

  /// Deep copy of the values, detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), node_->data, requires_grad);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op output, recording the graph edge only when some input needs it.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool track = false;
  if (grad_mode) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

/// Reverse topological order of every gradient-carrying node reachable from a
/// scalar loss. Replaying it resets intermediate adjoints, so two replays on
/// freshly zeroed leaves give identical gradients.
class Tape {
 public:
  static Tape record(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : "<null>"));
    }
    Tape tape;
    tape.root_ = loss.node();
    if (!loss.requires_grad()) return tape;

    // Iterative post-order DFS; reversed post-order is a valid reverse topo order.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    std::vector<detail::Node*> post;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        post.push_back(node);
        stack.pop_back();
      }
    }
    tape.order_.assign(post.rbegin(), post.rend());
    return tape;
  }

  std::size_t size() const { return order_.size(); }

  void backward() const {
    if (order_.empty()) return;
    for (auto* node : order_) {
      if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
    }
    double* seed = order_.front()->grad_buffer();
    seed[0] += 1.0;
    for (auto* node : order_) {
      if (!node->is_leaf()) node->backward(*node);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;  // keeps the graph alive
  std::vector<detail::Node*> order_;
};

/// Populates grad on every reachable requires_grad tensor.
inline void backward(const Tensor& loss) { Tape::record(loss).backward(); }

}  // namespace gtrxl
