#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ctvseg/tensor.hpp"

namespace ctvseg {

// A named, persistent model parameter. Gradients accumulate here across
// backward passes; the trainer owns zeroing and the update. Frozen
// parameters never receive gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool freeze = false)
      : name(std::move(n)), value(std::move(v)), grad(value.shape), frozen(freeze) {}

  void zero_grad() { grad.zero(); }
};

template <typename T>
class Tape;

// Handle to a tape node.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Nodes are appended in forward order (already
// topological); backward walks them in reverse. One tape corresponds to one
// forward pass and is discarded afterwards.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape<T>&)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward
    bool needs_grad = false;
    BackFn back;                     // empty for leaves
    Parameter<T>* param = nullptr;   // set for parameter leaves
  };

  Var constant(Tensor<T> v) { return push_leaf(std::move(v), false); }

  Var leaf(Tensor<T> v, bool needs_grad) { return push_leaf(std::move(v), needs_grad); }

  // Binds a parameter; its gradient is accumulated on backward unless frozen.
  Var param(Parameter<T>& p) {
    Var v = push_leaf(p.value, !p.frozen);
    nodes_[static_cast<size_t>(v.idx)].param = &p;
    return v;
  }

  Var push(Tensor<T> value, bool needs_grad, BackFn back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& val(Var v) const { return nodes_[check(v)].value; }
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }
  bool needs(Var v) const { return nodes_[check(v)].needs_grad; }

  // Reverse pass from a scalar loss. Populates gradients of every trainable
  // parameter reachable from it. Deterministic: fixed reverse order, no
  // data races, so repeated calls reproduce gradients bitwise.
  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.value.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(ln.value.shape));
    if (!ln.needs_grad)
      throw ContractError("backward called on a loss with no trainable ancestry");
    grad(loss)[0] = T(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(*this);
      if (n.param != nullptr && !n.param->frozen) {
        Tensor<T>& pg = n.param->grad;
        for (int64_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      }
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

  // Handle the next push() will return; lets op builders capture their own
  // output in the backward closure.
  Var next() const { return Var{static_cast<int>(nodes_.size())}; }

 private:
  Var push_leaf(Tensor<T> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  size_t check(Var v) const {
    if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
      throw ContractError("invalid tape handle");
    return static_cast<size_t>(v.idx);
  }

  std::vector<Node> nodes_;
};

}  // namespace ctvseg
