#pragma once

// Differentiable sRGB -> CIELAB -> LCH conversions (D65 white point) and the
// soft histogram quantiser used by the color-space losses.

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/LU>

#include "uieforge/ops.hpp"

namespace uieforge {

namespace color {

// Linear sRGB -> XYZ (D65).
inline const std::vector<std::vector<double>> kRgbToXyz = {
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
};

// Reference white: the XYZ image of linear (1,1,1), so white maps exactly to L=100.
inline std::array<double, 3> white_point() {
  std::array<double, 3> w{};
  for (int i = 0; i < 3; ++i) w[i] = kRgbToXyz[i][0] + kRgbToXyz[i][1] + kRgbToXyz[i][2];
  return w;
}

inline std::vector<std::vector<double>> rgb_to_normalized_xyz() {
  auto m = kRgbToXyz;
  const auto w = white_point();
  for (int i = 0; i < 3; ++i)
    for (auto& v : m[i]) v /= w[i];
  return m;
}

inline constexpr double kDelta = 6.0 / 29.0;
inline constexpr double kSrgbKnee = 0.04045;

inline constexpr double kLMin = 0, kLMax = 100;
inline constexpr double kABMin = -128, kABMax = 127;
inline constexpr std::size_t kBins = 256;

template <class T>
T srgb_to_linear(T v) {
  return v <= T(kSrgbKnee) ? v / T(12.92) : std::pow((v + T(0.055)) / T(1.055), T(2.4));
}
template <class T>
T srgb_to_linear_deriv(T v) {
  return v <= T(kSrgbKnee) ? T(1) / T(12.92)
                           : T(2.4) / T(1.055) * std::pow((v + T(0.055)) / T(1.055), T(1.4));
}
template <class T>
T linear_to_srgb(T v) {
  return v <= T(0.0031308) ? v * T(12.92) : T(1.055) * std::pow(v, T(1) / T(2.4)) - T(0.055);
}

// CIELAB companding function; the linear branch below delta^3 makes it C1.
template <class T>
T lab_f(T t) {
  constexpr double d3 = kDelta * kDelta * kDelta;
  return t > T(d3) ? std::cbrt(t) : t / T(3 * kDelta * kDelta) + T(4.0 / 29.0);
}
template <class T>
T lab_f_deriv(T t) {
  constexpr double d3 = kDelta * kDelta * kDelta;
  return t > T(d3) ? T(1) / (T(3) * std::cbrt(t) * std::cbrt(t)) : T(1) / T(3 * kDelta * kDelta);
}
template <class T>
T lab_f_inv(T f) {
  return f > T(kDelta) ? f * f * f : T(3 * kDelta * kDelta) * (f - T(4.0 / 29.0));
}

}  // namespace color

// LAB channels, each (N,1,H,W).
template <class T>
struct LabImage {
  Var<T> L, A, B;
};

// LCH channels, each (N,1,H,W); H in radians on (-pi, pi].
template <class T>
struct LchImage {
  Var<T> L, C, H;
};

// sRGB image (N,3,H,W) in [0,1] -> packed LAB (N,3,H,W).
template <class T>
Var<T> rgb_to_lab_packed(Var<T> rgb) {
  if (rgb.value().rank() != 4 || rgb.dim(1) != 3)
    shape_fail("rgb_to_lab", "expected (N,3,H,W), got " + to_string(rgb.shape()));
  auto x = clamp(rgb, T(0), T(1));
  x = elementwise(
      x, [](T v) { return color::srgb_to_linear(v); }, [](T v) { return color::srgb_to_linear_deriv(v); },
      [](T v, double m) { return std::abs(double(v) - color::kSrgbKnee) < m; });
  x = mix_channels(x, color::rgb_to_normalized_xyz());
  x = elementwise(x, [](T v) { return color::lab_f(v); }, [](T v) { return color::lab_f_deriv(v); });
  x = mix_channels(x, {{0, 116, 0}, {500, -500, 0}, {0, 200, -200}});
  auto offset = rgb.tape->constant(Tensor<T>({3}, std::vector<T>{T(-16), T(0), T(0)}));
  return add_bias(x, offset, 1);
}

template <class T>
LabImage<T> rgb_to_lab(Var<T> rgb) {
  auto lab = rgb_to_lab_packed(rgb);
  return {slice(lab, 1, 0, 1), slice(lab, 1, 1, 1), slice(lab, 1, 2, 1)};
}

// Hue is defined as 0 where chroma vanishes.
template <class T>
LchImage<T> lab_to_lch(const LabImage<T>& lab) {
  auto chroma = sqrt(add(square(lab.A), square(lab.B)));
  auto hue = atan2(lab.B, lab.A);
  return {lab.L, chroma, hue};
}

template <class T>
LchImage<T> rgb_to_lch(Var<T> rgb) {
  return lab_to_lch(rgb_to_lab(rgb));
}

// Value-level conversions ---------------------------------------------------------

template <class T>
Tensor<T> rgb_to_lab(const Tensor<T>& rgb) {
  Tape<T> tape;
  return rgb_to_lab_packed(tape.constant(rgb)).value();
}

// Packed LAB (N,3,H,W) -> sRGB in [0,1]; out-of-gamut values are clamped.
template <class T>
Tensor<T> lab_to_rgb(const Tensor<T>& lab) {
  if (lab.rank() != 4 || lab.dim(1) != 3)
    shape_fail("lab_to_rgb", "expected (N,3,H,W), got " + to_string(lab.shape()));
  const auto white = color::white_point();
  // Inverse of kRgbToXyz.
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = color::kRgbToXyz[i][j];
  const Eigen::Matrix3d inv = m.inverse();
  Tensor<T> out(lab.shape());
  const std::size_t n = lab.dim(0), hw = lab.dim(2) * lab.dim(3);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const double L = double(lab[(b * 3 + 0) * hw + i]);
      const double A = double(lab[(b * 3 + 1) * hw + i]);
      const double B = double(lab[(b * 3 + 2) * hw + i]);
      const double fy = (L + 16) / 116;
      Eigen::Vector3d xyz(white[0] * color::lab_f_inv(fy + A / 500), white[1] * color::lab_f_inv(fy),
                          white[2] * color::lab_f_inv(fy - B / 200));
      const Eigen::Vector3d lin = inv * xyz;
      for (int c = 0; c < 3; ++c)
        out[(b * 3 + c) * hw + i] = T(std::clamp(color::linear_to_srgb(lin[c]), 0.0, 1.0));
    }
  return out;
}

// Soft quantiser ----------------------------------------------------------------

// Per-element triangular soft assignment over `bins` centres spaced evenly on
// [lo, hi] (both ends are centres). Output shape is the input shape with a
// trailing bin axis; each bin vector sums to 1.
template <class T>
Var<T> quantize_soft(Var<T> channel, T lo, T hi, std::size_t bins = color::kBins) {
  if (bins < 2) throw Error("quantize_soft: need at least 2 bins");
  if (!(hi > lo)) throw Error("quantize_soft: empty range");
  const auto& cv = channel.value();
  Shape os = cv.shape();
  os.push_back(bins);
  Tensor<T> out(os);
  const T step_inv = T(bins - 1) / (hi - lo);
  auto& tape = *channel.tape;
  const double margin = tape.kink_margin();
  bool near = false;
  for (std::size_t i = 0; i < cv.size(); ++i) {
    const T v = std::clamp(cv[i], lo, hi);
    const T t = (v - lo) * step_inv;
    const std::size_t k = std::min(std::size_t(t), bins - 2);
    const T frac = t - T(k);
    out[i * bins + k] = T(1) - frac;
    out[i * bins + k + 1] = frac;
    if (margin > 0) {
      const double r = double(t) - std::round(double(t));
      if (std::abs(r) < margin * double(step_inv)) near = true;
    }
  }
  if (near) tape.flag_kink();
  return tape.record(std::move(out), {channel}, [channel, lo, hi, bins, step_inv](Tape<T>& t,
                                                                                const Tensor<T>& g) {
    auto* gc = t.grad_buffer(channel);
    if (!gc) return;
    const auto& cv = t.value(channel);
    for (std::size_t i = 0; i < cv.size(); ++i) {
      const T v = cv[i];
      if (v < lo || v > hi) continue;
      const T tt = (v - lo) * step_inv;
      const std::size_t k = std::min(std::size_t(tt), bins - 2);
      (*gc)[i] += step_inv * (g[i * bins + k + 1] - g[i * bins + k]);
    }
  });
}

}  // namespace uieforge
