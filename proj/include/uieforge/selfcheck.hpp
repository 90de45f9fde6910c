#pragma once

// Built-in verification suites shared by `uieforge selfcheck` and the
// acceptance runner: finite-difference gradients, color conversions, default
// model shapes and metric/loss oracles.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uieforge/color_space.hpp"
#include "uieforge/discriminator.hpp"
#include "uieforge/generator.hpp"
#include "uieforge/grad_check.hpp"
#include "uieforge/losses.hpp"
#include "uieforge/metrics.hpp"
#include "uieforge/oracle.hpp"

namespace uieforge::selfcheck {

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::size_t checks = 0;
  std::size_t failures = 0;
  double seconds = 0;
  std::string detail;  // first failures, one per line

  void expect(bool ok, const std::string& what) {
    ++checks;
    if (ok) return;
    passed = false;
    if (++failures <= 5) detail += what + "\n";
  }
};

struct GradCase {
  std::string name;
  GradFn<double> fn;
  InputSampler<double> sampler;
  GradCheckOptions opt;
};

namespace detail {

using VarD = Var<double>;

inline InputSampler<double> uniform(std::vector<Shape> shapes, double lo = -1, double hi = 1) {
  return [shapes, lo, hi](std::mt19937_64& rng) {
    std::vector<Tensor<double>> out;
    for (const auto& s : shapes) out.push_back(Tensor<double>::uniform(s, lo, hi, rng));
    return out;
  };
}

inline GradCase simple(std::string name, GradFn<double> fn, InputSampler<double> s) {
  return {std::move(name), std::move(fn), std::move(s), {}};
}

// Probes `body` with respect to its data inputs and the named parameters; the
// model is re-initialised from the probe stream and the probed parameters
// perturbed away from their zero-initialised values.
template <class Body>
GradCase with_params(std::string name, GeneratorConfig cfg, std::vector<Shape> data, std::vector<std::string> names,
                     Body body, std::size_t coords) {
  auto gen = std::make_shared<Generator<double>>(cfg);
  const std::size_t nd = data.size();
  GradFn<double> fn = [gen, names, nd, body](Tape<double>& t, const std::vector<VarD>& in) {
    Binder<double> p(t, gen->params(), false);
    for (std::size_t i = 0; i < names.size(); ++i) p.override(names[i], in[nd + i]);
    return body(*gen, p, std::vector<VarD>(in.begin(), in.begin() + long(nd)));
  };
  InputSampler<double> sampler = [gen, names, data](std::mt19937_64& rng) {
    std::vector<Tensor<double>> out;
    for (const auto& s : data) out.push_back(Tensor<double>::uniform(s, 0.0, 1.0, rng));
    gen->init(rng());
    for (const auto& n : names) {
      auto t = gen->params().at(n);
      for (auto& v : t.storage()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
      out.push_back(t);
    }
    return out;
  };
  GradCheckOptions opt;
  opt.step = 1e-6;
  opt.kink_margin = 1e-5;
  opt.coords_per_input = coords;
  return {std::move(name), fn, sampler, opt};
}

inline GeneratorConfig tiny(std::size_t side, std::size_t patch, std::size_t layers) {
  GeneratorConfig c;
  c.image_size = side;
  c.patch = patch;
  c.width_mult = 0.125;
  c.layers = layers;
  return c;
}

// Loss of a probed generated image against a reference fixed per probe.
template <class Body>
GradCase loss_case(std::string name, Shape shape, double lo, double hi, Body body, GradCheckOptions opt = {}) {
  auto ref = std::make_shared<Tensor<double>>();
  GradFn<double> fn = [ref, body](Tape<double>& t, const std::vector<VarD>& in) {
    return body(in[0], t.constant(*ref));
  };
  InputSampler<double> sampler = [ref, shape, lo, hi](std::mt19937_64& rng) {
    std::mt19937_64 other(rng() ^ 0x9e3779b97f4a7c15ULL);
    *ref = Tensor<double>::uniform(shape, lo, hi, other);
    return std::vector<Tensor<double>>{Tensor<double>::uniform(shape, lo, hi, rng)};
  };
  return {std::move(name), fn, sampler, opt};
}

}  // namespace detail

// Every differentiable primitive, the color chain, each loss and the
// transformer/generator composites.
inline std::vector<GradCase> gradient_cases() {
  using detail::simple;
  using detail::uniform;
  using detail::VarD;
  using F = GradFn<double>;
  std::vector<GradCase> c;
  c.push_back(simple("matmul", F([](auto&, auto& v) { return matmul(v[0], v[1]); }), uniform({{4, 5}, {5, 3}})));
  c.push_back(simple("matmul_batched", F([](auto&, auto& v) { return matmul(v[0], v[1]); }),
                     uniform({{2, 3, 4}, {2, 4, 5}})));
  c.push_back(simple("conv2d", F([](auto&, auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); }),
                     uniform({{1, 2, 6, 6}, {3, 2, 3, 3}, {3}})));
  c.push_back(simple("conv2d_strided", F([](auto&, auto& v) { return conv2d(v[0], v[1], std::nullopt, 2, 1); }),
                     uniform({{2, 2, 6, 6}, {3, 2, 3, 3}})));
  c.push_back(simple("conv2d_patch", F([](auto&, auto& v) { return conv2d(v[0], v[1], std::nullopt, 4, 0); }),
                     uniform({{1, 2, 8, 8}, {3, 2, 4, 4}})));
  c.push_back(simple("conv2d_pointwise", F([](auto&, auto& v) { return conv2d(v[0], v[1], v[2], 1, 0); }),
                     uniform({{2, 3, 4, 4}, {5, 3, 1, 1}, {5}})));
  const auto pos = uniform({{3, 4}, {3, 4}}, 0.5, 2.0);
  c.push_back(simple("add", F([](auto&, auto& v) { return add(v[0], v[1]); }), pos));
  c.push_back(simple("sub", F([](auto&, auto& v) { return sub(v[0], v[1]); }), pos));
  c.push_back(simple("mul", F([](auto&, auto& v) { return mul(v[0], v[1]); }), pos));
  c.push_back(simple("div", F([](auto&, auto& v) { return div(v[0], v[1]); }), pos));
  c.push_back(simple("atan2", F([](auto&, auto& v) { return atan2(v[0], v[1]); }), uniform({{3, 4}, {3, 4}}, -2, 2)));
  const auto un = uniform({{4, 6}}, -2, 2);
  c.push_back(simple("leaky_relu", F([](auto&, auto& v) { return leaky_relu(v[0]); }), un));
  c.push_back(simple("sigmoid", F([](auto&, auto& v) { return sigmoid(v[0]); }), un));
  c.push_back(simple("square", F([](auto&, auto& v) { return square(v[0]); }), un));
  c.push_back(simple("abs", F([](auto&, auto& v) { return abs(v[0]); }), un));
  c.push_back(simple("sqrt", F([](auto&, auto& v) { return sqrt(v[0]); }), uniform({{4, 6}}, 0.1, 3)));
  c.push_back(simple("log_clamped", F([](auto&, auto& v) { return log_clamped(v[0], 1e-8); }),
                     uniform({{4, 6}}, 0.1, 3)));
  c.push_back(simple("softmax", F([](auto&, auto& v) { return softmax(v[0], 1); }), uniform({{2, 5, 3}}, -3, 3)));
  c.push_back(simple("layer_norm", F([](auto&, auto& v) { return layer_norm(v[0], v[1], v[2]); }),
                     uniform({{3, 7}, {7}, {7}}, -3, 3)));
  c.push_back(simple("instance_norm", F([](auto&, auto& v) { return instance_norm(v[0]); }),
                     uniform({{2, 2, 4, 4}}, -3, 3)));
  c.push_back(simple("upsample_nearest", F([](auto&, auto& v) { return upsample_nearest(v[0], 2); }),
                     uniform({{1, 2, 3, 3}})));
  c.push_back(simple("avg_pool", F([](auto&, auto& v) { return avg_pool(v[0], 2); }), uniform({{1, 2, 4, 6}})));
  c.push_back(simple("concat", F([](auto&, auto& v) { return concat<double>({v[0], v[1]}, 1); }),
                     uniform({{2, 2, 3}, {2, 4, 3}})));
  c.push_back(simple("slice", F([](auto&, auto& v) { return slice(v[0], 2, 1, 2); }), uniform({{2, 2, 4}})));
  c.push_back(simple("transpose", F([](auto&, auto& v) { return transpose(v[0]); }), uniform({{2, 3, 4}})));
  c.push_back(simple("add_bias", F([](auto&, auto& v) { return add_bias(v[0], v[1], 1); }),
                     uniform({{2, 3, 4}, {3}})));
  c.push_back(simple("mul_bias", F([](auto&, auto& v) { return mul_bias(v[0], v[1], 2); }),
                     uniform({{2, 3, 4}, {4}})));
  c.push_back(simple("sum_axis", F([](auto&, auto& v) { return sum_axis(v[0], 1); }), uniform({{2, 3, 4}})));
  c.push_back(simple("mean", F([](auto&, auto& v) { return mean(v[0]); }), uniform({{2, 3, 4}})));
  c.push_back(simple("rgb_to_lab", F([](auto&, auto& v) { return rgb_to_lab_packed(v[0]); }),
                     uniform({{1, 3, 4, 4}}, 0.01, 0.99)));
  c.push_back(simple("rgb_to_lch", F([](auto&, auto& v) {
                       auto l = rgb_to_lch(v[0]);
                       return concat<double>({l.L, l.C, l.H}, 1);
                     }),
                     uniform({{1, 3, 4, 4}}, 0.01, 0.99)));
  c.push_back(simple("quantize_soft", F([](auto&, auto& v) { return quantize_soft(v[0], -128.0, 127.0); }),
                     uniform({{6}}, -120, 120)));

  using detail::loss_case;
  c.push_back(loss_case("loss_rgb_l2", {1, 3, 4, 4}, 0.05, 0.95,
                        [](VarD g, VarD r) { return loss_rgb(g, r, RgbPhase::Early); }));
  c.push_back(loss_case("loss_rgb_l1", {1, 3, 4, 4}, 0.05, 0.95,
                        [](VarD g, VarD r) { return loss_rgb(g, r, RgbPhase::Late); }));
  c.push_back(loss_case("loss_lab", {1, 3, 4, 4}, 0.05, 0.95, [](VarD g, VarD r) { return loss_lab(g, r); }));
  c.push_back(loss_case("loss_lch", {1, 3, 4, 4}, 0.05, 0.95, [](VarD g, VarD r) { return loss_lch(g, r); }));
  {
    auto ex = std::make_shared<FeatureExtractor<double>>(FeatureExtractor<double>::random(5));
    GradCheckOptions fine;
    fine.step = 1e-6;
    fine.kink_margin = 1e-6;
    c.push_back(loss_case("loss_perceptual", {1, 3, 16, 16}, 0.0, 1.0,
                          [ex](VarD g, VarD r) { return loss_perceptual(g, r, *ex); }, fine));
  }
  c.push_back(simple("loss_gan", F([](auto&, auto& v) {
                       auto g = loss_gan(v[0], v[1]);
                       return add(g.d_loss, scale(g.g_loss, 0.7));
                     }),
                     uniform({{1, 1, 3, 3}, {1, 1, 3, 3}}, -4, 4)));

  using detail::tiny;
  using detail::with_params;
  c.push_back(with_params("sgfmt_layer", tiny(32, 16, 1), {{1, 64, 2, 2}},
                          {"sgfmt.pe", "sgfmt.embed.weight", "sgfmt.layer0.ln1.gain", "sgfmt.layer0.attn.q.weight",
                           "sgfmt.layer0.attn.k.weight", "sgfmt.layer0.attn.v.weight", "sgfmt.layer0.attn.o.weight",
                           "sgfmt.layer0.ffn.fc1.weight", "sgfmt.layer0.ffn.fc2.bias"},
                          [](const Generator<double>& g, Binder<double>& p, const std::vector<VarD>& in) {
                            return g.sgfmt(p, in[0]);
                          },
                          4));
  {
    const auto cfg = tiny(16, 8, 1);
    std::vector<Shape> shapes;
    for (auto w : cfg.channels()) shapes.push_back({1, 4, w});
    c.push_back(with_params("cmsfft_layer", cfg, shapes,
                            {"cmsfft.layer0.head0.wq1", "cmsfft.layer0.head1.wq4", "cmsfft.layer0.head2.wk",
                             "cmsfft.layer0.head3.wv", "cmsfft.layer0.ln2.gain", "cmsfft.layer0.mlp3.fc1.weight",
                             "cmsfft.layer0.mlp1.fc2.bias"},
                            [](const Generator<double>& g, Binder<double>& p, const std::vector<VarD>& in) {
                              auto o = g.fusion_layer(p, 0, {in[0], in[1], in[2], in[3]});
                              return concat<double>({o[0], o[1], o[2], o[3]}, 2);
                            },
                            4));
  }
  c.push_back(with_params("tiny_generator", tiny(16, 8, 1), {{1, 3, 16, 16}},
                          {"enc.block1.conv1.weight", "enc.scale3.proj.weight", "enc.down4.bias",
                           "enc.bottleneck.weight", "sgfmt.pe", "cmsfft.patch2.weight", "cmsfft.layer0.head0.wk",
                           "dec.block4.up.weight", "dec.block1.conv2.weight", "dec.out.bias"},
                          [](const Generator<double>& g, Binder<double>& p, const std::vector<VarD>& in) {
                            return g.forward(p, in[0]).image;
                          },
                          2));
  return c;
}

// Smooth colour field plus noise, for realistic block statistics.
inline Tensor<double> textured(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<double> u(0, 1);
  const double f[3] = {u(rng) * 0.3, u(rng) * 0.3, u(rng) * 0.3};
  Tensor<double> t({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        t[(c * h + y) * w + x] = std::clamp(
            0.5 + 0.3 * std::sin(f[c] * double(x) + double(c)) * std::cos(f[c] * double(y)) + 0.1 * (u(rng) - 0.5),
            0.0, 1.0);
  return t;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Every case against central differences, rel. error < tol, for seeds 1..seeds.
inline SuiteResult gradient_suite(int seeds = 20, double tol = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{"gradient"};
  for (const auto& c : gradient_cases())
    for (int s = 1; s <= seeds; ++s) {
      auto opt = c.opt;
      opt.seed = std::uint64_t(s);
      const auto rep = grad_check<double>(c.fn, c.sampler, tol, opt);
      r.expect(rep.passed, c.name + " seed " + std::to_string(s) + ": " + rep.message);
    }
  r.seconds = seconds_since(t0);
  return r;
}

// Anchors, round trip over 10 000 random colors, hue wrap and achromatic conventions.
inline SuiteResult color_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{"color"};
  auto px = [](double a, double b, double c) { return Tensor<double>({1, 3, 1, 1}, {a, b, c}); };
  const auto white = rgb_to_lab(px(1, 1, 1));
  r.expect(std::abs(white[0] - 100) < 1e-3 && std::abs(white[1]) < 1e-3 && std::abs(white[2]) < 1e-3, "white anchor");
  const auto black = rgb_to_lab(px(0, 0, 0));
  r.expect(black.max_abs() < 1e-9, "black anchor");
  const auto red = rgb_to_lab(px(1, 0, 0));
  r.expect(std::abs(red[0] - 53.24) < 0.01 && std::abs(red[1] - 80.09) < 0.01 && std::abs(red[2] - 67.20) < 0.01,
           "red anchor");
  std::mt19937_64 rng(2);
  const auto img = Tensor<double>::uniform({1, 3, 100, 100}, 0, 1, rng);
  const double err = max_abs_diff(lab_to_rgb(rgb_to_lab(img)), img);
  r.expect(err < 1e-4, "round trip max error " + std::to_string(err));
  for (std::size_t i = 0; i < 10000; ++i) {
    const auto o = oracle::rgb_to_lab(img[i], img[10000 + i], img[20000 + i]);
    const auto lab = rgb_to_lab(px(img[i], img[10000 + i], img[20000 + i]));
    if (std::abs(lab[0] - o.L) > 1e-9 || std::abs(lab[1] - o.a) > 1e-9 || std::abs(lab[2] - o.b) > 1e-9) {
      r.expect(false, "oracle mismatch at color " + std::to_string(i));
      break;
    }
  }
  const double wrapped = wrap_angle_value((std::numbers::pi - 0.01) - (-std::numbers::pi + 0.01));
  r.expect(std::abs(std::abs(wrapped) - 0.02) < 1e-12, "hue wrap");
  Tape<double> t;
  for (double g : {0.0, 0.3, 1.0}) {
    auto lch = rgb_to_lch(t.constant(px(g, g, g)));
    r.expect(std::abs(lch.C.value().item()) < 1e-4, "achromatic chroma at gray " + std::to_string(g));
  }
  auto gray = lab_to_lch(LabImage<double>{t.constant(Tensor<double>({1, 1, 1, 1}, 70.0)),
                                          t.constant(Tensor<double>({1, 1, 1, 1}, 0.0)),
                                          t.constant(Tensor<double>({1, 1, 1, 1}, 0.0))});
  r.expect(gray.C.value().item() == 0 && gray.H.value().item() == 0, "achromatic hue convention");
  r.seconds = seconds_since(t0);
  return r;
}

// Default-configuration forward pass: every stage shape against its derivation.
inline SuiteResult shape_suite(const GeneratorConfig& cfg = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{"shape"};
  Generator<float> g(cfg);
  g.init(1);
  Discriminator<float> d(cfg);
  d.init(2);
  Tape<float> tape;
  Binder<float> gp(tape, g.params(), false), dp(tape, d.params(), false);
  std::mt19937_64 rng(3);
  const std::size_t s = cfg.image_size;
  auto img = tape.constant(Tensor<float>::uniform({1, 3, s, s}, 0.f, 1.f, rng));
  const auto c = cfg.channels();
  auto eq = [&](const std::string& what, const Shape& got, const Shape& want) {
    r.expect(got == want, what + " " + to_string(got) + " != " + to_string(want));
  };
  const auto f = g.encode(gp, img);
  for (int i = 0; i < 4; ++i)
    eq("encoder F" + std::to_string(i + 1), f.maps[i].shape(), {1, c[i], s >> i, s >> i});
  eq("bottleneck", f.bottleneck.shape(), {1, c[3], s / 16, s / 16});
  const std::size_t d_tokens = (s / cfg.patch) * (s / cfg.patch);
  const auto tokens = g.fusion_tokens(gp, f);
  for (int i = 0; i < 4; ++i) eq("fusion tokens S" + std::to_string(i + 1), tokens[i].shape(), {1, d_tokens, c[i]});
  r.expect(d_tokens == cfg.fusion_tokens(), "token count d");
  auto seq = g.sgfmt(gp, f.bottleneck);
  eq("sgfmt output", seq.shape(), {1, c[3], s / 16, s / 16});
  eq("sgfmt sequence", {cfg.bottleneck_tokens(), c[3]}, {(s / 16) * (s / 16), c[3]});
  const auto fused = g.cmsfft(gp, f);
  for (int i = 0; i < 4; ++i) eq("cmsfft O" + std::to_string(i + 1), fused[i].shape(), f.maps[i].shape());
  const auto out = g.decode(gp, seq, fused);
  for (int i = 0; i < 4; ++i) eq("decoder tap " + std::to_string(i + 1), out.taps[i].shape(), {1, c[i], s >> i, s >> i});
  eq("output image", out.image.shape(), {1, 3, s, s});
  const auto logits = d.discriminate(dp, {out.image, out.taps});
  eq("logit map", logits.shape(), {1, 1, s / 16, s / 16});
  r.seconds = seconds_since(t0);
  return r;
}

// Library losses and metrics against the loop-based oracles on `sets` random inputs.
inline SuiteResult oracle_suite(int sets = 50, double tol = 1e-6) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{"oracle"};
  auto to_images = [](const Tensor<double>& t) {
    const std::size_t n = t.dim(0), h = t.dim(2), w = t.dim(3);
    std::vector<oracle::Image> out;
    for (std::size_t b = 0; b < n; ++b)
      out.push_back({int(h), int(w), std::vector<double>(t.data() + b * 3 * h * w, t.data() + (b + 1) * 3 * h * w)});
    return out;
  };
  auto near = [&](const std::string& what, double a, double b, int s) {
    r.expect(std::abs(a - b) <= tol, what + " set " + std::to_string(s) + ": " + std::to_string(a) + " vs " +
                                         std::to_string(b));
  };
  for (int s = 0; s < sets; ++s) {
    std::mt19937_64 rng(100 + std::uint64_t(s));
    Tape<double> t;
    const auto g = Tensor<double>::uniform({2, 3, 5, 5}, 0.02, 0.98, rng);
    const auto ref = Tensor<double>::uniform({2, 3, 5, 5}, 0.02, 0.98, rng);
    auto gv = t.constant(g), rv = t.constant(ref);
    near("loss_lab", loss_lab(gv, rv).value().item(), oracle::loss_lab(to_images(g), to_images(ref)), s);
    near("loss_lch", loss_lch(gv, rv).value().item(), oracle::loss_lch(to_images(g), to_images(ref)), s);
    const auto real = Tensor<double>::normal({2, 1, 3, 3}, 0, 3, rng);
    const auto fake = Tensor<double>::normal({2, 1, 3, 3}, 0, 3, rng);
    auto gan = loss_gan(t.constant(real), t.constant(fake));
    const auto [od, og] = oracle::loss_gan(real.to_vector(), fake.to_vector());
    near("loss_gan d", gan.d_loss.value().item(), od, s);
    near("loss_gan g", gan.g_loss.value().item(), og, s);

    std::mt19937_64 irng(1000 + std::uint64_t(s));
    const std::size_t h = 11 + std::size_t(s) % 13, w = 12 + (std::size_t(s) * 7) % 17;
    const auto a = s % 2 ? textured(irng, h, w) : Tensor<double>::uniform({3, h, w}, 0, 1, irng);
    const auto b = Tensor<double>::uniform({3, h, w}, 0, 1, irng);
    const oracle::Image oa{int(h), int(w), a.to_vector()}, ob{int(h), int(w), b.to_vector()};
    near("ssim", ssim(a, b), oracle::ssim(oa, ob), s);
    near("uiqm", uiqm(a), oracle::uiqm(oa), s);
    near("uciqe", uciqe(a), oracle::uciqe(oa), s);
  }
  r.seconds = seconds_since(t0);
  return r;
}

inline std::string summary(const SuiteResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS" : "FAIL") << "  " << r.name << "  (" << r.checks - r.failures << "/" << r.checks
     << " checks, " << std::fixed;
  os.precision(1);
  os << r.seconds << " s)";
  return os.str();
}

}  // namespace uieforge::selfcheck
