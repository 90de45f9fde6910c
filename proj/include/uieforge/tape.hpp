#pragma once

#include <cassert>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>

#include "uieforge/tensor.hpp"

namespace uieforge {

template <class T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

// Reverse-mode gradient tape.
//
// Every op appends one node holding its forward value and a closure that
// propagates the node's gradient to its inputs. backward() walks the nodes in
// reverse creation order, so a node's gradient is complete before its
// closure runs. Nodes that do not depend on any variable carry no closure.
//
// Ops also report when an input sits within `kink_margin` of a point where the
// op is not differentiable (rectifier kinks, piecewise boundaries). Gradient
// checks use that flag to resample their probe instead of failing.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), true, nullptr); }

  // Records an op output. The closure is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> out, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || requires_grad(v);
    return push(std::move(out), rg, rg ? std::move(fn) : nullptr);
  }

  Var<T> record(Tensor<T> out, const std::vector<Var<T>>& inputs, Backward fn) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || requires_grad(v);
    return push(std::move(out), rg, rg ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() root with respect to `v`; zeros when `v`
  // did not participate.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var<T> v) const { return !nodes_.at(v.id).grad.empty(); }

  // Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var<T> v, const Tensor<T>& g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) shape_fail("accumulate", n.value.shape(), g.shape());
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad += g;
  }

  // Mutable gradient buffer, zero-initialised on first use. Null for constants.
  Tensor<T>* grad_buffer(Var<T> v) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  // Seeds d(root)/d(root) = 1 elementwise and propagates to every node.
  void backward(Var<T> root) {
    for (auto& n : nodes_) n.grad = Tensor<T>();
    auto& r = nodes_.at(root.id);
    if (!r.requires_grad) return;
    r.grad = Tensor<T>::ones(r.value.shape());
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  void set_kink_margin(double m) { kink_margin_ = m; }
  double kink_margin() const { return kink_margin_; }
  void flag_kink() { near_kink_ = true; }
  bool near_kink() const { return near_kink_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> v, bool rg, Backward fn) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), rg, std::move(fn)});
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  double kink_margin_ = 0.0;
  bool near_kink_ = false;
};

}  // namespace uieforge
