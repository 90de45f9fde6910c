#pragma once

// Differentiable kernels recorded on a Tape. Every op computes its forward
// value eagerly and registers a reverse closure. Shapes follow NCHW for
// images and (batch, tokens, channels) for sequences.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "uieforge/tape.hpp"
#include "uieforge/tensor.hpp"

namespace uieforge {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.2;

// Fault injection for negative-control self checks; 1.0 means no fault.
namespace fault {
inline double& conv_weight_grad_scale() {
  static double scale = 1.0;
  return scale;
}
}  // namespace fault

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

template <class T>
MapR<T> mat(T* p, std::size_t rows, std::size_t cols) {
  return MapR<T>(p, Eigen::Index(rows), Eigen::Index(cols));
}
template <class T>
CMapR<T> cmat(const T* p, std::size_t rows, std::size_t cols) {
  return CMapR<T>(p, Eigen::Index(rows), Eigen::Index(cols));
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline void require_rank(const std::string& op, const Shape& s, std::size_t r) {
  if (s.size() != r)
    shape_fail(op, "expected rank " + std::to_string(r) + ", got " + to_string(s));
}

inline void require_same(const std::string& op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, a, b);
}

}  // namespace detail

// Elementwise ------------------------------------------------------------------

// Generic differentiable elementwise map. `df(x)` returns the local
// derivative; `kink(x, margin)` reports proximity to a non-differentiable point.
template <class T, class F, class DF, class Kink>
Var<T> elementwise(Var<T> x, F f, DF df, Kink kink) {
  auto& tape = *x.tape;
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  const double margin = tape.kink_margin();
  bool near = false;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = f(xv[i]);
    if (margin > 0 && kink(xv[i], margin)) near = true;
  }
  if (near) tape.flag_kink();
  return tape.record(std::move(out), {x}, [x, df](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    const auto& xv = t.value(x);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += g[i] * df(xv[i]);
  });
}

template <class T, class F, class DF>
Var<T> elementwise(Var<T> x, F f, DF df) {
  return elementwise(x, f, df, [](T, double) { return false; });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same("sub", a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same("mul", a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::require_same("div", a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  return elementwise(x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T s) {
  return elementwise(x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <class T>
Var<T> square(Var<T> x) {
  return elementwise(x, [](T v) { return v * v; }, [](T v) { return 2 * v; });
}

template <class T>
Var<T> abs(Var<T> x) {
  return elementwise(
      x, [](T v) { return std::abs(v); }, [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); },
      [](T v, double m) { return std::abs(double(v)) < m; });
}

template <class T>
Var<T> leaky_relu(Var<T> x, T slope = T(kLeakySlope)) {
  return elementwise(
      x, [slope](T v) { return v > 0 ? v : slope * v; },
      [slope](T v) { return v > 0 ? T(1) : slope; },
      [](T v, double m) { return std::abs(double(v)) < m; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  auto f = [](T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  };
  return elementwise(x, f, [f](T v) {
    const T s = f(v);
    return s * (1 - s);
  });
}

// log(x) with x clamped below at eps; zero gradient in the clamped region.
template <class T>
Var<T> log_clamped(Var<T> x, T eps) {
  return elementwise(
      x, [eps](T v) { return std::log(std::max(v, eps)); },
      [eps](T v) { return v > eps ? T(1) / v : T(0); },
      [eps](T v, double m) { return std::abs(double(v - eps)) < m * double(eps); });
}

// Square root; gradient defined as 0 at the origin.
template <class T>
Var<T> sqrt(Var<T> x) {
  return elementwise(
      x, [](T v) { return std::sqrt(std::max(v, T(0))); },
      [](T v) { return v > 0 ? T(0.5) / std::sqrt(v) : T(0); },
      [](T v, double m) { return double(v) < m; });
}

template <class T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return elementwise(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v) { return (v > lo && v < hi) ? T(1) : T(0); },
      [lo, hi](T v, double m) {
        return std::abs(double(v - lo)) < m || std::abs(double(v - hi)) < m;
      });
}

// Maps an angle difference into (-pi, pi].
template <class T>
T wrap_angle_value(T v) {
  constexpr T pi = std::numbers::pi_v<T>;
  constexpr T two_pi = 2 * std::numbers::pi_v<T>;
  T r = std::fmod(v + pi, two_pi);
  if (r <= 0) r += two_pi;
  return r - pi;
}

template <class T>
Var<T> wrap_angle(Var<T> x) {
  return elementwise(
      x, [](T v) { return wrap_angle_value(v); }, [](T) { return T(1); },
      [](T v, double m) {
        const double r = std::abs(double(wrap_angle_value(v)));
        return std::abs(r - std::numbers::pi) < m;
      });
}

// Two-argument arctangent atan2(y, x); gradient defined as 0 at the origin.
template <class T>
Var<T> atan2(Var<T> y, Var<T> x) {
  detail::require_same("atan2", y.shape(), x.shape());
  auto& tape = *y.tape;
  const auto& yv = y.value();
  const auto& xv = x.value();
  Tensor<T> out(yv.shape());
  const double margin = tape.kink_margin();
  bool near = false;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (yv[i] == 0 && xv[i] == 0) ? T(0) : std::atan2(yv[i], xv[i]);
    const double r2 = double(xv[i]) * xv[i] + double(yv[i]) * yv[i];
    if (margin > 0 && (r2 < margin || (xv[i] < 0 && std::abs(double(yv[i])) < margin))) near = true;
  }
  if (near) tape.flag_kink();
  return tape.record(std::move(out), {y, x}, [y, x](Tape<T>& t, const Tensor<T>& g) {
    const auto& yv = t.value(y);
    const auto& xv = t.value(x);
    auto* gy = t.grad_buffer(y);
    auto* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T r2 = xv[i] * xv[i] + yv[i] * yv[i];
      if (r2 == 0) continue;
      if (gy) (*gy)[i] += g[i] * xv[i] / r2;
      if (gx) (*gx)[i] -= g[i] * yv[i] / r2;
    }
  });
}

// Broadcast ops ---------------------------------------------------------------

// x + b where b has shape {x.dim(axis)} and is broadcast over other axes.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> b, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || b.value().rank() != 1 || b.dim(0) != xv.dim(axis))
    shape_fail("add_bias", xv.shape(), b.shape());
  const auto sp = detail::split_axis(xv.shape(), axis);
  Tensor<T> out = xv;
  const auto& bv = b.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.n; ++c) {
      T* p = out.data() + (o * sp.n + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) p[i] += bv[c];
    }
  return x.tape->record(std::move(out), {x, b}, [x, b, sp](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, g);
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t c = 0; c < sp.n; ++c) {
          const T* p = g.data() + (o * sp.n + c) * sp.inner;
          T s = 0;
          for (std::size_t i = 0; i < sp.inner; ++i) s += p[i];
          (*gb)[c] += s;
        }
  });
}

// x * g where g has shape {x.dim(axis)}.
template <class T>
Var<T> mul_bias(Var<T> x, Var<T> gamma, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || gamma.value().rank() != 1 || gamma.dim(0) != xv.dim(axis))
    shape_fail("mul_bias", xv.shape(), gamma.shape());
  const auto sp = detail::split_axis(xv.shape(), axis);
  Tensor<T> out = xv;
  const auto& gv = gamma.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.n; ++c) {
      T* p = out.data() + (o * sp.n + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) p[i] *= gv[c];
    }
  return x.tape->record(std::move(out), {x, gamma}, [x, gamma, sp](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(x);
    const auto& gv = t.value(gamma);
    auto* gx = t.grad_buffer(x);
    auto* gg = t.grad_buffer(gamma);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t c = 0; c < sp.n; ++c) {
        const std::size_t base = (o * sp.n + c) * sp.inner;
        T s = 0;
        for (std::size_t i = 0; i < sp.inner; ++i) {
          if (gx) (*gx)[base + i] += g[base + i] * gv[c];
          s += g[base + i] * xv[base + i];
        }
        if (gg) (*gg)[c] += s;
      }
  });
}

// x + b where b matches x without its leading (batch) axis.
template <class T>
Var<T> add_batched(Var<T> x, Var<T> b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (xs.size() != bs.size() + 1 || !std::equal(bs.begin(), bs.end(), xs.begin() + 1))
    shape_fail("add_batched", xs, bs);
  const std::size_t inner = b.value().size();
  Tensor<T> out = x.value();
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t i = 0; i < inner; ++i) out[n * inner + i] += b.value()[i];
  return x.tape->record(std::move(out), {x, b}, [x, b, inner](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, g);
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t n = 0; n < g.size() / inner; ++n)
        for (std::size_t i = 0; i < inner; ++i) (*gb)[i] += g[n * inner + i];
  });
}

// Output channel o = sum_i m[o][i] * input channel i, for a constant matrix m.
template <class T>
Var<T> mix_channels(Var<T> x, const std::vector<std::vector<double>>& m) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || m.empty() || m[0].size() != xv.dim(1))
    shape_fail("mix_channels", "matrix columns must equal channel count of " + to_string(xv.shape()));
  const auto sp = detail::split_axis(xv.shape(), 1);
  const std::size_t cout = m.size();
  Shape os = xv.shape();
  os[1] = cout;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t co = 0; co < cout; ++co) {
      T* dst = out.data() + (o * cout + co) * sp.inner;
      for (std::size_t ci = 0; ci < sp.n; ++ci) {
        const T w = T(m[co][ci]);
        const T* src = xv.data() + (o * sp.n + ci) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += w * src[i];
      }
    }
  return x.tape->record(std::move(out), {x}, [x, m, sp, cout](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t co = 0; co < cout; ++co) {
        const T* src = g.data() + (o * cout + co) * sp.inner;
        for (std::size_t ci = 0; ci < sp.n; ++ci) {
          const T w = T(m[co][ci]);
          T* dst = gx->data() + (o * sp.n + ci) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += w * src[i];
        }
      }
  });
}

// Reductions -------------------------------------------------------------------

template <class T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (auto v : x.value().storage()) s += v;
  return x.tape->record(Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_buffer(x))
      for (auto& v : gx->storage()) v += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  const T n = T(x.value().size());
  return scale(sum(x), T(1) / n);
}

// Sum along `axis`, removing it (rank-1 inputs reduce to shape {1}).
template <class T>
Var<T> sum_axis(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank()) shape_fail("sum_axis", "axis out of range for " + to_string(xv.shape()));
  const auto sp = detail::split_axis(xv.shape(), axis);
  Shape os = xv.shape();
  os.erase(os.begin() + std::ptrdiff_t(axis));
  if (os.empty()) os = {1};
  Tensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.n; ++c) {
      const T* p = xv.data() + (o * sp.n + c) * sp.inner;
      T* d = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) d[i] += p[i];
    }
  return x.tape->record(std::move(out), {x}, [x, sp](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t c = 0; c < sp.n; ++c) {
        T* p = gx->data() + (o * sp.n + c) * sp.inner;
        const T* d = g.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) p[i] += d[i];
      }
  });
}

// Softmax & normalisation -------------------------------------------------------

template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank()) shape_fail("softmax", "axis out of range for " + to_string(xv.shape()));
  const auto sp = detail::split_axis(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
      T s = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= s;
    }
  const auto yid = static_cast<std::uint32_t>(x.tape->size());
  return x.tape->record(std::move(out), {x}, [x, sp, yid](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    const auto& yv = t.value(Var<T>{&t, yid});
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          dot += g[j] * yv[j];
        }
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          (*gx)[j] += yv[j] * (g[j] - dot);
        }
      }
  });
}

namespace detail {

// Normalises contiguous groups of `group` elements to zero mean, unit variance.
template <class T>
Var<T> normalize_groups(Var<T> x, std::size_t group, const char* name) {
  const auto& xv = x.value();
  if (group == 0 || xv.size() % group != 0) shape_fail(name, "bad normalisation group");
  const std::size_t groups = xv.size() / group;
  Tensor<T> out(xv.shape());
  std::vector<T> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* p = xv.data() + gi * group;
    T m = 0;
    for (std::size_t i = 0; i < group; ++i) m += p[i];
    m /= T(group);
    T var = 0;
    for (std::size_t i = 0; i < group; ++i) var += (p[i] - m) * (p[i] - m);
    var /= T(group);
    const T is = T(1) / std::sqrt(var + T(kNormEps));
    inv_std[gi] = is;
    T* q = out.data() + gi * group;
    for (std::size_t i = 0; i < group; ++i) q[i] = (p[i] - m) * is;
  }
  auto* tape = x.tape;
  const auto out_id = static_cast<std::uint32_t>(tape->size());
  return tape->record(std::move(out), {x},
                      [x, group, groups, inv_std = std::move(inv_std), out_id](Tape<T>& t,
                                                                             const Tensor<T>& g) {
                        auto* gx = t.grad_buffer(x);
                        if (!gx) return;
                        const auto& yv = t.value(Var<T>{&t, out_id});
                        for (std::size_t gi = 0; gi < groups; ++gi) {
                          const T* gy = g.data() + gi * group;
                          const T* y = yv.data() + gi * group;
                          T mg = 0, mgy = 0;
                          for (std::size_t i = 0; i < group; ++i) {
                            mg += gy[i];
                            mgy += gy[i] * y[i];
                          }
                          mg /= T(group);
                          mgy /= T(group);
                          T* d = gx->data() + gi * group;
                          for (std::size_t i = 0; i < group; ++i)
                            d[i] += inv_std[gi] * (gy[i] - mg - y[i] * mgy);
                        }
                      });
}

}  // namespace detail

// Normalises over the last axis (pre-affine).
template <class T>
Var<T> layer_norm(Var<T> x) {
  return detail::normalize_groups(x, x.value().shape().back(), "layer_norm");
}

// Layer norm with learnable per-channel gain and offset.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> offset) {
  const std::size_t axis = x.value().rank() - 1;
  return add_bias(mul_bias(layer_norm(x), gain, axis), offset, axis);
}

// Normalises each (n, c) plane of a rank-4 tensor over its last two axes.
template <class T>
Var<T> instance_norm(Var<T> x) {
  detail::require_rank("instance_norm", x.shape(), 4);
  return detail::normalize_groups(x, x.dim(2) * x.dim(3), "instance_norm");
}

// Linear algebra ---------------------------------------------------------------

// Supports (m,k)x(k,n), batched (B,m,k)x(B,k,n) and shared-weight (B,m,k)x(k,n).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t ar = av.rank(), br = bv.rank();
  if (!((ar == 2 && br == 2) || (ar == 3 && br == 3) || (ar == 3 && br == 2)))
    shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t batch = ar == 3 ? av.dim(0) : 1;
  const std::size_t m = av.dim(ar - 2), k = av.dim(ar - 1);
  const std::size_t kb = bv.dim(br - 2), n = bv.dim(br - 1);
  if (k != kb || (br == 3 && bv.dim(0) != batch)) shape_fail("matmul", av.shape(), bv.shape());
  const bool shared_b = br == 2;
  Shape os = ar == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(os);
  if (shared_b) {
    detail::mat(out.data(), batch * m, n).noalias() =
        detail::cmat(av.data(), batch * m, k) * detail::cmat(bv.data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::mat(out.data() + i * m * n, m, n).noalias() =
          detail::cmat(av.data() + i * m * k, m, k) * detail::cmat(bv.data() + i * k * n, k, n);
  }
  return a.tape->record(std::move(out), {a, b},
                        [a, b, batch, m, k, n, shared_b](Tape<T>& t, const Tensor<T>& g) {
                          const auto& av = t.value(a);
                          const auto& bv = t.value(b);
                          auto* ga = t.grad_buffer(a);
                          auto* gb = t.grad_buffer(b);
                          if (shared_b) {
                            auto G = detail::cmat(g.data(), batch * m, n);
                            if (ga)
                              detail::mat(ga->data(), batch * m, k).noalias() +=
                                  G * detail::cmat(bv.data(), k, n).transpose();
                            if (gb)
                              detail::mat(gb->data(), k, n).noalias() +=
                                  detail::cmat(av.data(), batch * m, k).transpose() * G;
                            return;
                          }
                          for (std::size_t i = 0; i < batch; ++i) {
                            auto G = detail::cmat(g.data() + i * m * n, m, n);
                            if (ga)
                              detail::mat(ga->data() + i * m * k, m, k).noalias() +=
                                  G * detail::cmat(bv.data() + i * k * n, k, n).transpose();
                            if (gb)
                              detail::mat(gb->data() + i * k * n, k, n).noalias() +=
                                  detail::cmat(av.data() + i * m * k, m, k).transpose() * G;
                          }
                        });
}

// Swaps the last two axes.
template <class T>
Var<T> transpose(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() < 2) shape_fail("transpose", "rank < 2: " + to_string(xv.shape()));
  const std::size_t r = xv.dim(xv.rank() - 2), c = xv.dim(xv.rank() - 1);
  const std::size_t batch = xv.size() / (r * c);
  Shape os = xv.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor<T> out(os);
  for (std::size_t b = 0; b < batch; ++b)
    detail::mat(out.data() + b * r * c, c, r) = detail::cmat(xv.data() + b * r * c, r, c).transpose();
  return x.tape->record(std::move(out), {x}, [x, r, c, batch](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t b = 0; b < batch; ++b)
        detail::mat(gx->data() + b * r * c, r, c) += detail::cmat(g.data() + b * r * c, c, r).transpose();
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
  if (numel(s) != x.value().size()) shape_fail("reshape", x.shape(), s);
  Tensor<T> out = x.value().reshaped(s);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, g.reshaped(t.value(x).shape()));
  });
}

// Structural -----------------------------------------------------------------

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) shape_fail("concat", "no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis out of range for " + to_string(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
    os[axis] += s[axis];
  }
  const auto sp = detail::split_axis(os, axis);
  Tensor<T> out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const auto& xv = x.value();
    const std::size_t n = xv.dim(axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(xv.data() + o * n * sp.inner, n * sp.inner,
                  out.data() + (o * sp.n + off) * sp.inner);
    off += n;
  }
  return xs[0].tape->record(std::move(out), xs, [xs, offsets, sp, axis](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t j = 0; j < xs.size(); ++j) {
      auto* gx = t.grad_buffer(xs[j]);
      if (!gx) continue;
      const std::size_t n = gx->dim(axis);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = g.data() + (o * sp.n + offsets[j]) * sp.inner;
        T* dst = gx->data() + o * n * sp.inner;
        for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || start + len > xv.dim(axis) || len == 0)
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                            ") invalid for " + to_string(xv.shape()));
  const auto sp = detail::split_axis(xv.shape(), axis);
  Shape os = xv.shape();
  os[axis] = len;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.n + start) * sp.inner, len * sp.inner,
                out.data() + o * len * sp.inner);
  return x.tape->record(std::move(out), {x}, [x, sp, start, len](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* src = g.data() + o * len * sp.inner;
      T* dst = gx->data() + (o * sp.n + start) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

// Copies the value into a fresh constant: gradient flow stops here.
template <class T>
Var<T> detach(Var<T> x) {
  return x.tape->constant(x.value());
}

// Spatial ------------------------------------------------------------------------

struct Conv2dGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

namespace detail {

template <class T>
void im2col(const T* img, const Conv2dGeometry& g, T* col) {
  const std::size_t ohw = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * ohw;
        const T* plane = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = plane + std::size_t(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im(const T* col, const Conv2dGeometry& g, T* img) {
  const std::size_t ohw = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * ohw;
        T* plane = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          T* dst = plane + std::size_t(iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            if (ix >= 0 && ix < std::ptrdiff_t(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// 2-D cross-correlation. x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), optional bias (Cout).
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> bias, std::size_t stride,
              std::size_t pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1))
    shape_fail("conv2d", xv.shape(), wv.shape());
  if (stride == 0) shape_fail("conv2d", "stride must be positive");
  Conv2dGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3),
                   stride, pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    shape_fail("conv2d", "kernel larger than padded input: " + to_string(xv.shape()) + " vs " +
                             to_string(wv.shape()));
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (bias && (bias->value().rank() != 1 || bias->dim(0) != g.cout))
    shape_fail("conv2d", wv.shape(), bias->shape());

  const std::size_t K = g.cin * g.kh * g.kw, ohw = g.oh * g.ow;
  const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
  Tensor<T> out({g.n, g.cout, g.oh, g.ow});
  AlignedVector<T> col(pointwise ? 0 : K * ohw);
  auto W = detail::cmat(wv.data(), g.cout, K);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* img = xv.data() + n * g.cin * g.h * g.w;
    const T* cp = img;
    if (!pointwise) {
      detail::im2col(img, g, col.data());
      cp = col.data();
    }
    auto O = detail::mat(out.data() + n * g.cout * ohw, g.cout, ohw);
    O.noalias() = W * detail::cmat(cp, K, ohw);
    if (bias) {
      const auto& bv = bias->value();
      for (std::size_t c = 0; c < g.cout; ++c) O.row(Eigen::Index(c)).array() += bv[c];
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return x.tape->record(std::move(out), inputs, [x, w, bias, g, K, ohw, pointwise](Tape<T>& t,
                                                                                  const Tensor<T>& gout) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    auto* gx = t.grad_buffer(x);
    auto* gw = t.grad_buffer(w);
    Tensor<T>* gb = bias ? t.grad_buffer(*bias) : nullptr;
    AlignedVector<T> col(pointwise ? 0 : K * ohw);
    auto W = detail::cmat(wv.data(), g.cout, K);
    for (std::size_t n = 0; n < g.n; ++n) {
      auto G = detail::cmat(gout.data() + n * g.cout * ohw, g.cout, ohw);
      if (gb)
        for (std::size_t c = 0; c < g.cout; ++c) (*gb)[c] += G.row(Eigen::Index(c)).sum();
      const T* img = xv.data() + n * g.cin * g.h * g.w;
      if (gw) {
        const T* cp = img;
        if (!pointwise) {
          detail::im2col(img, g, col.data());
          cp = col.data();
        }
        detail::mat(gw->data(), g.cout, K).noalias() +=
            T(fault::conv_weight_grad_scale()) * (G * detail::cmat(cp, K, ohw).transpose());
      }
      if (gx) {
        T* dimg = gx->data() + n * g.cin * g.h * g.w;
        if (pointwise) {
          detail::mat(dimg, K, ohw).noalias() += W.transpose() * G;
        } else {
          detail::mat(col.data(), K, ohw).noalias() = W.transpose() * G;
          detail::col2im(col.data(), g, dimg);
        }
      }
    }
  });
}

// Nearest-neighbour upsampling by an integer factor on the last two axes.
template <class T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor = 2) {
  detail::require_rank("upsample_nearest", x.shape(), 4);
  const auto& xv = x.value();
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor<T> out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
  return x.tape->record(std::move(out), {x}, [x, planes, h, w, factor, oh, ow](Tape<T>& t,
                                                                             const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          (*gx)[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
  });
}

// Average pooling with window = stride = factor on the last two axes.
template <class T>
Var<T> avg_pool(Var<T> x, std::size_t factor = 2) {
  detail::require_rank("avg_pool", x.shape(), 4);
  const auto& xv = x.value();
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % factor || w % factor)
    shape_fail("avg_pool", "spatial size " + to_string(xv.shape()) + " not divisible by " +
                               std::to_string(factor));
  const std::size_t oh = h / factor, ow = w / factor;
  const T inv = T(1) / T(factor * factor);
  Tensor<T> out({xv.dim(0), xv.dim(1), oh, ow});
  // Pairwise summation: a window of identical values averages back exactly.
  std::vector<T> win(factor * factor);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            win[dy * factor + dx] = xv[(p * h + y * factor + dy) * w + xx * factor + dx];
        for (std::size_t n = win.size(); n > 1; n = (n + 1) / 2) {
          for (std::size_t i = 0; i < n / 2; ++i) win[i] = win[2 * i] + win[2 * i + 1];
          if (n % 2) win[n / 2] = win[n - 1];
        }
        out[(p * oh + y) * ow + xx] = win[0] * inv;
      }
  return x.tape->record(std::move(out), {x}, [x, planes, h, w, factor, oh, ow, inv](Tape<T>& t,
                                                                                  const Tensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          (*gx)[(p * h + y) * w + xx] += g[(p * oh + y / factor) * ow + xx / factor] * inv;
  });
}

// (N,C,H,W) -> (N,H*W,C) token sequence, and back.
template <class T>
Var<T> map_to_tokens(Var<T> x) {
  detail::require_rank("map_to_tokens", x.shape(), 4);
  const auto s = x.shape();
  return transpose(reshape(x, {s[0], s[1], s[2] * s[3]}));
}

template <class T>
Var<T> tokens_to_map(Var<T> x, std::size_t h, std::size_t w) {
  detail::require_rank("tokens_to_map", x.shape(), 3);
  const auto s = x.shape();
  if (s[1] != h * w) shape_fail("tokens_to_map", "token count " + std::to_string(s[1]) +
                                                     " != " + std::to_string(h) + "x" + std::to_string(w));
  return reshape(transpose(x), {s[0], s[2], h, w});
}

}  // namespace uieforge
