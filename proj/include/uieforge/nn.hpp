#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uieforge/ops.hpp"

namespace uieforge {

// Named parameter tensors, ordered by name.
template <class T>
class ParamStore {
 public:
  void set(const std::string& name, Tensor<T> value) { params_[name] = std::move(value); }

  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : params_) out.set(k, v.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

// Places parameters on a tape on first use. Frozen binders record constants,
// so no gradient is collected for them while gradients still flow through.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const auto& v = store_->at(name);
    auto var = trainable_ ? tape_->variable(v) : tape_->constant(v);
    bound_.emplace(name, var);
    return var;
  }

  // Binds `name` to an existing tape value instead of the stored tensor.
  void override(const std::string& name, Var<T> v) { bound_[name] = v; }

  Tape<T>& tape() { return *tape_; }
  const ParamStore<T>& store() const { return *store_; }
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

  // Gradients of every bound parameter after tape.backward().
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> g;
    for (const auto& [k, v] : bound_) g.emplace(k, tape_->grad(v));
    return g;
  }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

// Parameter initialisation -----------------------------------------------------

template <class T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, std::uint64_t seed) : store_(&store), rng_(seed) {}

  // Centered uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  void fan_in_uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const T b = T(1) / std::sqrt(T(fan_in));
    store_->set(name, Tensor<T>::uniform(std::move(shape), -b, b, rng_));
  }
  void constant(const std::string& name, Shape shape, T v) { store_->set(name, Tensor<T>(std::move(shape), v)); }

  void conv(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k, bool bias = true) {
    fan_in_uniform(prefix + ".weight", {cout, cin, k, k}, cin * k * k);
    if (bias) constant(prefix + ".bias", {cout}, T(0));
  }
  void linear(const std::string& prefix, std::size_t in, std::size_t out, bool bias = true) {
    fan_in_uniform(prefix + ".weight", {in, out}, in);
    if (bias) constant(prefix + ".bias", {out}, T(0));
  }
  void layer_norm(const std::string& prefix, std::size_t width) {
    constant(prefix + ".gain", {width}, T(1));
    constant(prefix + ".offset", {width}, T(0));
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  ParamStore<T>* store_;
  std::mt19937_64 rng_;
};

// Layer helpers ---------------------------------------------------------------

template <class T>
Var<T> conv(Binder<T>& p, const std::string& prefix, Var<T> x, std::size_t stride = 1) {
  auto w = p(prefix + ".weight");
  const std::size_t k = w.dim(2);
  std::optional<Var<T>> b;
  if (p.store().contains(prefix + ".bias")) b = p(prefix + ".bias");
  // "same" padding: output spatial size = input / stride.
  return conv2d(x, w, b, stride, (k - 1) / 2);
}

// x: (..., in) -> (..., out)
template <class T>
Var<T> linear(Binder<T>& p, const std::string& prefix, Var<T> x) {
  auto y = matmul(x, p(prefix + ".weight"));
  if (p.store().contains(prefix + ".bias")) y = add_bias(y, p(prefix + ".bias"), y.value().rank() - 1);
  return y;
}

template <class T>
Var<T> layer_norm(Binder<T>& p, const std::string& prefix, Var<T> x) {
  return layer_norm(x, p(prefix + ".gain"), p(prefix + ".offset"));
}

// conv 3x3 -> instance norm -> leaky rectifier
template <class T>
Var<T> conv_unit(Binder<T>& p, const std::string& prefix, Var<T> x) {
  return leaky_relu(instance_norm(conv(p, prefix, x)));
}

}  // namespace uieforge
