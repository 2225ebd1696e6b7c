#pragma once

// Reverse-mode differentiation over a recorded computation graph.
//
// A Var wraps a shared node holding a value and (once backward has run) an
// accumulated gradient. While a Tape is active on the current thread, every op
// whose inputs require gradients appends a node carrying its adjoint rule.
// Append order is a topological order, so backward walks the tape in reverse
// and visits each node exactly once. Without an active tape ops produce plain
// values and keep no references to their inputs.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cpra/tensor.hpp"

namespace cpra {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into inputs
  const char* op = "leaf";

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient after backward; zeros when nothing reached this value.
  Tensor<T> grad() const {
    return node_->grad.empty() ? Tensor<T>(node_->value.shape()) : node_->grad;
  }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  void append(std::shared_ptr<Node<T>> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node<T>>>& nodes() const noexcept { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

namespace detail {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <typename T>
Tape<T>* current_tape() {
  return detail::active_tape<T>();
}

// Makes `tape` the recording target for this thread until destruction.
// Passing nullptr suspends recording (no-grad region).
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape) : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = tape; }
  ~TapeScope() { detail::active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

template <typename... Vs>
bool any_requires_grad(const Vs&... vs) {
  return (... || vs.requires_grad());
}

// Builds the output node of an op. The adjoint closure is attached only when
// recording and at least one input needs a gradient.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, bool inputs_need_grad, const char* op, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  Tape<T>* tape = current_tape<T>();
  if (tape && inputs_need_grad) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->append(node);
  }
  return Var<T>(std::move(node));
}

template <typename T>
Tensor<T>* grad_sink(const Var<T>& v) {
  return v.requires_grad() ? &v.node()->grad_buffer() : nullptr;
}

// Runs reverse accumulation from a scalar root recorded on `tape`.
template <typename T>
void backward(const Var<T>& root, Tape<T>& tape) {
  if (root.value().size() != 1)
    shape_fail("backward: root must be a scalar, got ", root.shape().str());
  if (!root.requires_grad()) return;
  root.node()->grad_buffer().fill(T(1));
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

}  // namespace cpra
