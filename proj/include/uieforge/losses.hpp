#pragma once

// Training objectives: pixel, LAB, LCH, perceptual and adversarial terms and
// their weighted generator total.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "uieforge/checkpoint.hpp"
#include "uieforge/color_space.hpp"
#include "uieforge/nn.hpp"

namespace uieforge {

inline constexpr double kLogEps = 1e-8;

enum class RgbPhase { Early, Late };

struct LossWeights {
  double alpha = 0.001;  // LAB
  double beta = 1.0;     // LCH
  double gamma = 0.1;    // RGB
  double mu = 100.0;     // perceptual
  double adversarial = 1.0;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || mu < 0 || adversarial < 0) throw ConfigError("loss weights must be nonnegative");
  }
};

struct LossReport {
  double rgb = 0, lab = 0, lch = 0, perceptual = 0, adversarial_g = 0, adversarial_d = 0, total = 0;
};

inline double total_generator_loss(const LossReport& r, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {{"rgb", r.rgb},
                                                   {"lab", r.lab},
                                                   {"lch", r.lch},
                                                   {"perceptual", r.perceptual},
                                                   {"adversarial_g", r.adversarial_g}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw Error(std::string("non-finite loss component '") + name + "'");
  return w.adversarial * r.adversarial_g + w.alpha * r.lab + w.beta * r.lch + w.gamma * r.rgb + w.mu * r.perceptual;
}

template <class T>
Var<T> loss_rgb(Var<T> gen, Var<T> ref, RgbPhase phase) {
  detail::require_same("loss_rgb", gen.shape(), ref.shape());
  auto d = sub(gen, ref);
  return mean(phase == RgbPhase::Early ? square(d) : abs(d));
}

namespace detail {

// -mean over pixels of sum_bins Q(ref) log Q(gen); `ref_q` is a constant distribution.
template <class T>
Var<T> soft_cross_entropy(Var<T> gen_channel, const Tensor<T>& ref_q, T lo, T hi) {
  auto qg = quantize_soft(gen_channel, lo, hi);
  detail::require_same("cross_entropy", qg.shape(), ref_q.shape());
  const std::size_t pixels = gen_channel.value().size();
  auto ce = sum(mul(gen_channel.tape->constant(ref_q), log_clamped(qg, T(kLogEps))));
  return scale(ce, T(-1) / T(pixels));
}

template <class T>
Tensor<T> quantized_value(Var<T> channel, T lo, T hi) {
  Tape<T> t;
  return quantize_soft(t.constant(channel.value()), lo, hi).value();
}

}  // namespace detail

// Squared L difference plus quantised A and B cross-entropies, averaged over pixels.
template <class T>
Var<T> loss_lab(Var<T> gen, Var<T> ref) {
  detail::require_same("loss_lab", gen.shape(), ref.shape());
  const auto lg = rgb_to_lab(gen);
  const auto lr = rgb_to_lab(detach(ref));
  const T ab_lo = T(color::kABMin), ab_hi = T(color::kABMax);
  auto l_term = mean(square(sub(lr.L, lg.L)));
  auto a_term = detail::soft_cross_entropy(lg.A, detail::quantized_value(lr.A, ab_lo, ab_hi), ab_lo, ab_hi);
  auto b_term = detail::soft_cross_entropy(lg.B, detail::quantized_value(lr.B, ab_lo, ab_hi), ab_lo, ab_hi);
  return add(add(l_term, a_term), b_term);
}

// Quantised L cross-entropy plus squared chroma and wrapped hue differences.
template <class T>
Var<T> loss_lch(Var<T> gen, Var<T> ref) {
  detail::require_same("loss_lch", gen.shape(), ref.shape());
  const auto cg = rgb_to_lch(gen);
  const auto cr = rgb_to_lch(detach(ref));
  const T l_lo = T(color::kLMin), l_hi = T(color::kLMax);
  auto l_term = detail::soft_cross_entropy(cg.L, detail::quantized_value(cr.L, l_lo, l_hi), l_lo, l_hi);
  auto c_term = mean(square(sub(cr.C, cg.C)));
  auto h_term = mean(square(wrap_angle(sub(cr.H, cg.H))));
  return add(add(l_term, c_term), h_term);
}

// Frozen convolutional feature pyramid. Each stage is a stride-2 3x3 conv
// followed by a leaky rectifier; every stage output is a tap. With no stages
// the only tap is the input itself.
template <class T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  static FeatureExtractor random(std::uint64_t seed, std::vector<std::size_t> widths = {8, 16, 32, 64}) {
    FeatureExtractor e;
    Initializer<T> ini(e.params_, seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      ini.conv(stage_name(i), in, widths[i], 3);
      in = widths[i];
    }
    e.stages_ = widths.size();
    return e;
  }

  static FeatureExtractor identity() { return {}; }

  // External weights stored as perceptual/stage{i}.weight / .bias.
  static FeatureExtractor load(const std::filesystem::path& path) {
    const auto a = Archive::load(path);
    FeatureExtractor e;
    for (std::size_t i = 0;; ++i) {
      const std::string w = "perceptual/" + stage_name(i) + ".weight";
      if (!a.contains(w)) break;
      e.params_.set(stage_name(i) + ".weight", a.get<T>(w));
      e.params_.set(stage_name(i) + ".bias", a.get<T>("perceptual/" + stage_name(i) + ".bias"));
      e.stages_ = i + 1;
    }
    if (e.stages_ == 0) throw CheckpointError(path.string() + ": no perceptual stages found");
    return e;
  }

  std::size_t stages() const { return stages_; }
  const ParamStore<T>& params() const { return params_; }

  std::vector<Var<T>> features(Var<T> img) const {
    if (stages_ == 0) return {img};
    const auto& s = img.shape();
    const std::size_t f = std::size_t(1) << stages_;
    if (s.size() != 4 || s[2] % f || s[3] % f)
      shape_fail("perceptual", "input " + to_string(s) + " must be (N,C,H,W) with H,W divisible by " +
                                   std::to_string(f));
    Binder<T> p(*img.tape, params_, false);
    std::vector<Var<T>> taps;
    auto x = img;
    for (std::size_t i = 0; i < stages_; ++i) {
      x = leaky_relu(conv(p, stage_name(i), x, 2));
      taps.push_back(x);
    }
    return taps;
  }

 private:
  static std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }

  ParamStore<T> params_;
  std::size_t stages_ = 0;
};

// Mean over taps of the feature-space mean squared error.
template <class T>
Var<T> loss_perceptual(Var<T> gen, Var<T> ref, const FeatureExtractor<T>& extractor) {
  detail::require_same("loss_perceptual", gen.shape(), ref.shape());
  const auto fg = extractor.features(gen);
  const auto fr = extractor.features(detach(ref));
  Var<T> total = mean(square(sub(fg[0], fr[0])));
  for (std::size_t i = 1; i < fg.size(); ++i) total = add(total, mean(square(sub(fg[i], fr[i]))));
  return scale(total, T(1) / T(fg.size()));
}

// log(sigmoid(x)) without overflow.
template <class T>
T log_sigmoid_value(T x) {
  return std::min(x, T(0)) - std::log1p(std::exp(-std::abs(x)));
}

template <class T>
Var<T> log_sigmoid(Var<T> x) {
  return elementwise(
      x, [](T v) { return log_sigmoid_value(v); },
      [](T v) { return v >= 0 ? std::exp(-v) / (T(1) + std::exp(-v)) : T(1) / (T(1) + std::exp(v)); });
}

template <class T>
struct GanLoss {
  Var<T> d_loss, g_loss;
};

// Discriminator: -mean log s(real) - mean log(1 - s(fake)); generator: -mean log s(fake).
template <class T>
GanLoss<T> loss_gan(Var<T> real_logits, Var<T> fake_logits) {
  detail::require_same("loss_gan", real_logits.shape(), fake_logits.shape());
  auto d = scale(add(mean(log_sigmoid(real_logits)), mean(log_sigmoid(scale(fake_logits, T(-1))))), T(-1));
  auto g = scale(mean(log_sigmoid(fake_logits)), T(-1));
  return {d, g};
}

// Weighted generator objective on the tape; components must be scalars.
template <class T>
Var<T> total_generator_loss(Var<T> rgb, Var<T> lab, Var<T> lch, Var<T> per, Var<T> adv_g, const LossWeights& w) {
  auto t = add(scale(adv_g, T(w.adversarial)), scale(lab, T(w.alpha)));
  t = add(t, scale(lch, T(w.beta)));
  t = add(t, scale(rgb, T(w.gamma)));
  return add(t, scale(per, T(w.mu)));
}

}  // namespace uieforge
