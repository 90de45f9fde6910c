#pragma once

#include <cmath>
#include <map>
#include <string>

#include "uieforge/checkpoint.hpp"
#include "uieforge/nn.hpp"

namespace uieforge {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters without a gradient entry are left untouched.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (const auto& [name, g] : grads) {
      auto& p = params.at(name);
      auto& s = slots_[name];
      if (s.m.empty()) {
        s.m = Tensor<T>::zeros(p.shape());
        s.v = Tensor<T>::zeros(p.shape());
      }
      if (g.shape() != p.shape()) shape_fail("adam:" + name, p.shape(), g.shape());
      for (std::size_t i = 0; i < p.size(); ++i) {
        s.m[i] = T(opt_.beta1 * s.m[i] + (1 - opt_.beta1) * g[i]);
        s.v[i] = T(opt_.beta2 * s.v[i] + (1 - opt_.beta2) * double(g[i]) * g[i]);
        const double mh = s.m[i] / c1;
        const double vh = s.v[i] / c2;
        p[i] = T(p[i] - lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  std::uint64_t steps() const { return t_; }

  void save(Archive& a, const std::string& prefix) const {
    a.put(prefix + "step", Tensor<double>::scalar(double(t_)));
    for (const auto& [k, s] : slots_) {
      a.put(prefix + "m/" + k, s.m);
      a.put(prefix + "v/" + k, s.v);
    }
  }

  void load(const Archive& a, const std::string& prefix, const ParamStore<T>& params) {
    slots_.clear();
    t_ = std::uint64_t(a.get<double>(prefix + "step").item());
    for (const auto& [k, p] : params) {
      if (!a.contains(prefix + "m/" + k)) continue;
      Slot s{a.get<T>(prefix + "m/" + k), a.get<T>(prefix + "v/" + k)};
      if (s.m.shape() != p.shape()) throw CheckpointError("optimizer state shape mismatch for " + k);
      slots_[k] = std::move(s);
    }
  }

 private:
  struct Slot {
    Tensor<T> m, v;
  };
  AdamOptions opt_;
  std::map<std::string, Slot> slots_;
  std::uint64_t t_ = 0;
};

}  // namespace uieforge
