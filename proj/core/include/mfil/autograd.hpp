#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mfil/tensor.hpp"

namespace mfil {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive applications. Nodes are appended as ops run, so
/// every node's inputs precede it and a reverse sweep is a valid topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op output. The backward rule is kept only when some input needs a gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{},
                          std::move(inputs)});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated so far for a node; empty before the node is reached.
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Zero-initialized gradient buffer for a node, or nullptr when it takes no gradient.
  Tensor<T>* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return &n.grad;
  }

  /// Reverse sweep from a scalar loss. Returns the number of backward rules run.
  std::size_t backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw GradError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!nodes_[loss.id()].requires_grad) {
      throw GradError("loss is detached: no grad-enabled leaf reaches it");
    }
    grad_sink(loss.id())->fill(T(1));
    std::size_t visited = 0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
      ++visited;
    }
    return visited;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<std::size_t> inputs;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

/// Per-thread tally of forward-op floating point work.
/// Conventions: one multiply-accumulate counts as one op; norms and transcendental
/// activations cost 5 ops per element; elementwise arithmetic costs 1 per element;
/// the selective scan costs 2 per state per token.
class FlopCounter {
 public:
  static void add(double ops);
  static double total();
  static void reset();
};

/// Test fixture hook: when armed with an op name, that op's backward rule
/// deliberately returns a wrong gradient. Used for negative-control checks.
namespace fault {
void arm(std::string op);
void disarm();
bool active(std::string_view op);
const std::string& armed();
}  // namespace fault

}  // namespace mfil
