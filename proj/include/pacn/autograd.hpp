#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pacn/error.hpp"
#include "pacn/tensor.hpp"

namespace pacn {

/// Handle to a node recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
  friend bool operator==(Var a, Var b) { return a.id == b.id; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already topologically sorted and backward() is a single reverse
/// sweep. Not thread-safe.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Receives the node's forward value and its accumulated gradient, and
  // accumulates into the gradients of the node's inputs.
  using BackwardFn = std::function<void(Tape&, const TensorT& value, const TensorT& grad)>;

  Var leaf(TensorT value, bool trainable = false) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = trainable;
    node.trainable = trainable;
    node.op = "leaf";
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var constant(TensorT value) { return leaf(std::move(value), false); }

  Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn), op);
  }

  Var record(TensorT value, const std::vector<Var>& inputs, BackwardFn fn, const char* op) {
    Node node;
    node.value = std::move(value);
    node.op = op;
    for (Var v : inputs) {
      check(v);
      node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const TensorT& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient accumulator for `v`, zero-initialised on first access.
  TensorT& grad(Var v) {
    check(v);
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const {
    check(v);
    return !nodes_[v.id].grad.empty();
  }

  const char* op_name(Var v) const {
    check(v);
    return nodes_[v.id].op;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    check(loss);
    if (nodes_[loss.id].value.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_str(nodes_[loss.id].value.shape()));
    }
    grad(loss).fill(T{1});
    for (std::int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.value, n.grad);
    }
  }

  std::vector<Var> trainable_leaves() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].trainable) out.push_back(Var{static_cast<std::int32_t>(i)});
    }
    return out;
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
    const char* op = "";
  };

  void check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw UsageError("invalid tape variable " + std::to_string(v.id));
    }
  }

  std::vector<Node> nodes_;
};

/// Runs the backward sweep and returns (leaf, gradient) for every trainable
/// leaf, in recording order. Leaves the loss does not depend on get zeros.
template <class T>
std::vector<std::pair<Var, BasicTensor<T>>> backward(Tape<T>& tape, Var loss) {
  tape.backward(loss);
  std::vector<std::pair<Var, BasicTensor<T>>> out;
  for (Var v : tape.trainable_leaves()) out.emplace_back(v, tape.grad(v));
  return out;
}

}  // namespace pacn
