#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "uieforge/ops.hpp"

namespace uieforge {

struct GradCheckOptions {
  double step = 1e-5;
  // Inputs within this distance of a kink (in any op's argument) trigger a resample.
  double kink_margin = 1e-4;
  int max_resamples = 25;
  // Coordinates probed per input tensor; 0 probes every element.
  std::size_t coords_per_input = 0;
  std::size_t max_probed = 10000;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0;
  bool passed = false;
  int resamples = 0;
  std::size_t probed = 0;
  std::size_t worst_input = 0;
  std::string message;
};

template <class T>
using GradFn = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

template <class T>
using InputSampler = std::function<std::vector<Tensor<T>>(std::mt19937_64&)>;

namespace detail {

// Relative error of one gradient tensor, normalised by its largest magnitude.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale < 1e-10) return diff;
  return diff / scale;
}

template <class T>
T projected_value(const GradFn<T>& fn, const std::vector<Tensor<T>>& inputs, const Tensor<T>& proj) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  auto out = fn(tape, vars);
  const auto& ov = out.value();
  double s = 0;
  for (std::size_t i = 0; i < ov.size(); ++i) s += double(ov[i]) * double(proj[i]);
  return T(s);
}

}  // namespace detail

// Compares reverse-mode gradients of `fn` (projected onto a random direction
// in output space) against central finite differences. Inputs come from
// `sampler`; a probe is redrawn when its forward pass lands near a kink or
// when the difference quotients at step h and h/2 disagree, which means a
// perturbation crossed a kink and the finite-difference estimate is invalid.
template <class T>
GradCheckReport grad_check(const GradFn<T>& fn, const InputSampler<T>& sampler, double tolerance,
                           GradCheckOptions opt = {}) {
  std::mt19937_64 rng(opt.seed);
  GradCheckReport rep;
  auto redraw = [&] {
    if (++rep.resamples > opt.max_resamples) {
      rep.message = "no kink-free probe found";
      return false;
    }
    return true;
  };
  for (;;) {
    auto inputs = sampler(rng);
    Tape<T> tape;
    tape.set_kink_margin(opt.kink_margin);
    std::vector<Var<T>> vars;
    for (const auto& in : inputs) vars.push_back(tape.variable(in));
    auto out = fn(tape, vars);
    if (tape.near_kink()) {
      if (!redraw()) return rep;
      continue;
    }
    const auto proj = Tensor<T>::uniform(out.shape(), T(-1), T(1), rng);
    tape.backward(sum(mul(out, tape.constant(proj))));
    std::vector<std::vector<double>> analytic;
    for (const auto& v : vars) {
      const auto g = tape.grad(v);
      analytic.emplace_back(g.storage().begin(), g.storage().end());
    }

    std::vector<std::vector<std::size_t>> coords(inputs.size());
    rep.probed = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      std::vector<std::size_t> all(inputs[k].size());
      std::iota(all.begin(), all.end(), 0);
      if (opt.coords_per_input && opt.coords_per_input < all.size()) {
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(opt.coords_per_input);
        std::sort(all.begin(), all.end());
      }
      rep.probed += all.size();
      coords[k] = std::move(all);
    }
    if (rep.probed > opt.max_probed) {
      rep.message = "too many probed coordinates: " + std::to_string(rep.probed);
      return rep;
    }

    auto quotient = [&](std::size_t k, std::size_t j, double h) {
      const T orig = inputs[k][j];
      inputs[k][j] = T(double(orig) + h);
      const double up = double(detail::projected_value(fn, inputs, proj));
      inputs[k][j] = T(double(orig) - h);
      const double down = double(detail::projected_value(fn, inputs, proj));
      inputs[k][j] = orig;
      return (up - down) / (2 * h);
    };
    bool crossed = false;
    double worst = 0;
    std::size_t worst_input = 0;
    for (std::size_t k = 0; k < inputs.size() && !crossed; ++k) {
      std::vector<double> a, n, half;
      for (auto j : coords[k]) {
        a.push_back(analytic[k][j]);
        n.push_back(quotient(k, j, opt.step));
        half.push_back(quotient(k, j, opt.step / 2));
      }
      const double err = detail::relative_error(a, n);
      crossed = err >= tolerance && detail::relative_error(half, n) >= tolerance / 10;
      if (err > worst) {
        worst = err;
        worst_input = k;
      }
    }
    if (crossed) {
      if (!redraw()) return rep;
      continue;
    }
    rep.max_rel_error = worst;
    rep.worst_input = worst_input;
    break;
  }
  rep.passed = rep.max_rel_error < tolerance;
  rep.message = "max rel. error " + std::to_string(rep.max_rel_error) + " (input " + std::to_string(rep.worst_input) +
                ", " + std::to_string(rep.resamples) + " redraws)";
  return rep;
}

// Fixed-input variant: a kink at the given point is reported as a failure.
template <class T>
GradCheckReport grad_check(const GradFn<T>& fn, std::vector<Tensor<T>> inputs, double tolerance,
                           GradCheckOptions opt = {}) {
  opt.max_resamples = 0;
  return grad_check<T>(fn, [inputs](std::mt19937_64&) { return inputs; }, tolerance, opt);
}

}  // namespace uieforge
