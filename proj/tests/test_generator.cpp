#include <gtest/gtest.h>

#include <random>

#include "uieforge/generator.hpp"
#include "test_util.hpp"

using namespace uieforge;
using namespace uieforge::testing;

namespace {

GeneratorConfig tiny_config(std::size_t side = 16, std::size_t patch = 8, std::size_t layers = 2) {
  GeneratorConfig c;
  c.image_size = side;
  c.patch = patch;
  c.width_mult = 0.125;
  c.layers = layers;
  return c;
}

// Gradient check of `body` with respect to its data inputs plus the named parameters.
// The parameter values are redrawn from the initializer on every probe.
template <class Body>
GradCheckReport check_with_params(const GeneratorConfig& cfg, std::vector<Shape> data_shapes,
                                  std::vector<std::string> names, Body body, std::uint64_t seed,
                                  std::size_t coords = 6) {
  auto gen = std::make_shared<Generator<double>>(cfg);
  const std::size_t nd = data_shapes.size();
  GradFn<double> fn = [gen, names, nd, body](Tape<double>& t, const std::vector<Var<double>>& in) {
    Binder<double> p(t, gen->params(), false);
    for (std::size_t i = 0; i < names.size(); ++i) p.override(names[i], in[nd + i]);
    return body(*gen, p, std::vector<Var<double>>(in.begin(), in.begin() + long(nd)));
  };
  InputSampler<double> sampler = [gen, names, data_shapes](std::mt19937_64& rng) {
    std::vector<Tensor<double>> out;
    for (const auto& s : data_shapes) out.push_back(Tensor<double>::uniform(s, 0.0, 1.0, rng));
    gen->init(rng());
    // Perturb zero-initialised entries so biases and PE are probed away from zero.
    for (const auto& n : names) {
      auto t = gen->params().at(n);
      for (auto& v : t.storage()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
      out.push_back(t);
    }
    return out;
  };
  GradCheckOptions opt;
  opt.seed = seed;
  opt.step = 1e-6;
  opt.kink_margin = 1e-5;
  opt.coords_per_input = coords;
  return grad_check<double>(fn, sampler, 1e-5, opt);
}

}  // namespace

TEST(GeneratorConfig, RejectsIndivisibleSide) {
  auto c = tiny_config();
  c.image_size = 40;
  EXPECT_THROW(c.validate(), ConfigError);
  c.image_size = 48;  // divisible by 16, not by patch 32
  c.patch = 32;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(GeneratorConfig, WidthMultiplierRounding) {
  GeneratorConfig c;
  c.width_mult = 0.25;
  EXPECT_EQ(c.channels(), (std::array<std::size_t, 4>{16, 32, 64, 128}));
  EXPECT_EQ(c.total_channels(), 240u);
  c.width_mult = 1.0;
  EXPECT_EQ(c.total_channels(), 960u);
}

TEST(Generator, DeskScaleShapes) {
  GeneratorConfig c;
  c.image_size = 64;
  c.patch = 8;
  c.width_mult = 0.25;
  Generator<float> g(c);
  g.init(1);
  std::mt19937_64 rng(2);
  Tape<float> t;
  Binder<float> p(t, g.params(), false);
  auto img = t.constant(Tensor<float>::uniform({2, 3, 64, 64}, 0.f, 1.f, rng));
  auto f = g.encode(p, img);
  EXPECT_EQ(f.maps[0].shape(), (Shape{2, 16, 64, 64}));
  EXPECT_EQ(f.maps[1].shape(), (Shape{2, 32, 32, 32}));
  EXPECT_EQ(f.maps[2].shape(), (Shape{2, 64, 16, 16}));
  EXPECT_EQ(f.maps[3].shape(), (Shape{2, 128, 8, 8}));
  EXPECT_EQ(f.bottleneck.shape(), (Shape{2, 128, 4, 4}));
  auto s = g.fusion_tokens(p, f);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(s[i].dim(1), 64u) << "scale " << i;
  auto fused = g.cmsfft(p, f);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(fused[i].shape(), f.maps[i].shape());
  auto out = g.decode(p, g.sgfmt(p, f.bottleneck), fused);
  EXPECT_EQ(out.image.shape(), (Shape{2, 3, 64, 64}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out.taps[i].shape(), f.maps[i].shape());
  for (auto v : out.image.value().storage()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
}

TEST(Generator, ShapeLawAcrossSides) {
  for (std::size_t side : {16, 32, 48}) {
    auto c = tiny_config(side, 16);
    if (side % 16) continue;
    Generator<float> g(c);
    g.init(3);
    std::mt19937_64 rng(side);
    auto x = Tensor<float>::uniform({1, 3, side, side}, 0.f, 1.f, rng);
    EXPECT_EQ(g.enhance(x).shape(), x.shape()) << side;
  }
}

TEST(Generator, ZeroImageGivesZeroFeatures) {
  Generator<double> g(tiny_config());
  g.init(4);
  Tape<double> t;
  Binder<double> p(t, g.params(), false);
  auto f = g.encode(p, t.constant(Tensor<double>::zeros({1, 3, 16, 16})));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(f.maps[i].value().max_abs(), 0.0);
  EXPECT_EQ(f.bottleneck.value().max_abs(), 0.0);
}

TEST(Generator, ForwardIsBitDeterministic) {
  Generator<float> g(tiny_config(32, 16));
  g.init(5);
  std::mt19937_64 rng(6);
  auto x = Tensor<float>::uniform({2, 3, 32, 32}, 0.f, 1.f, rng);
  EXPECT_EQ(g.enhance(x), g.enhance(x));
  Generator<float> h(tiny_config(32, 16));
  h.init(5);
  EXPECT_EQ(h.enhance(x), g.enhance(x));
}

TEST(Sgfmt, ZeroOutputProjectionsReduceToResidualIdentity) {
  auto c = tiny_config(32, 16);
  Generator<double> g(c);
  g.init(7);
  for (std::size_t l = 0; l < c.layers; ++l) {
    g.params().at("sgfmt.layer" + std::to_string(l) + ".attn.o.weight").fill(0);
    g.params().at("sgfmt.layer" + std::to_string(l) + ".ffn.fc2.weight").fill(0);
  }
  std::mt19937_64 rng(8);
  Tape<double> t;
  Binder<double> p(t, g.params(), false);
  auto x = t.constant(Tensor<double>::uniform({2, 64, 2, 2}, -1, 1, rng));
  auto y = g.sgfmt(p, x);
  auto s_in = add_batched(linear(p, "sgfmt.embed", map_to_tokens(x)), p("sgfmt.pe"));
  EXPECT_EQ(y.value(), tokens_to_map(s_in, 2, 2).value());
}

TEST(Sgfmt, PositionEmbeddingMismatchIsShapeError) {
  Generator<double> g(tiny_config(32, 16));
  g.init(1);
  Tape<double> t;
  Binder<double> p(t, g.params(), false);
  EXPECT_THROW(g.sgfmt(p, t.constant(Tensor<double>::zeros({1, 64, 4, 4}))), ShapeError);
}

TEST(Sgfmt, PositionEmbeddingReceivesGradient) {
  Generator<double> g(tiny_config(32, 16));
  g.init(9);
  std::mt19937_64 rng(10);
  Tape<double> t;
  Binder<double> p(t, g.params(), true);
  auto y = g.sgfmt(p, t.constant(Tensor<double>::uniform({1, 64, 2, 2}, -1, 1, rng)));
  t.backward(sum(square(y)));
  EXPECT_GT(t.grad(p("sgfmt.pe")).max_abs(), 0.0);
}

TEST(Cmsfft, AttentionRowsSumToOneOverChannels) {
  Generator<double> g(tiny_config());
  std::mt19937_64 rng(11);
  Tape<double> t;
  auto q = t.constant(Tensor<double>::normal({2, 4, 8}, 0, 3, rng));
  auto k = t.constant(Tensor<double>::normal({2, 4, 120}, 0, 3, rng));
  auto w = g.channel_attention_weights(q, k);
  ASSERT_EQ(w.shape(), (Shape{2, 8, 120}));
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 120; ++c) s += w.value()[r * 120 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Cmsfft, UniformLogitsAverageValueChannels) {
  Generator<double> g(tiny_config());
  std::mt19937_64 rng(12);
  Tape<double> t;
  auto q = t.constant(Tensor<double>::zeros({1, 4, 8}));
  auto k = t.constant(Tensor<double>::normal({1, 4, 120}, 0, 1, rng));
  const auto vt = Tensor<double>::normal({1, 120, 4}, 0, 1, rng);
  auto out = matmul(g.channel_attention_weights(q, k), t.constant(vt));
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0;
    for (std::size_t c = 0; c < 120; ++c) mean += vt[c * 4 + j] / 120;
    for (std::size_t r = 0; r < 8; ++r) EXPECT_NEAR(out.value()[r * 4 + j], mean, 1e-12);
  }
}

TEST(Generator, EveryParameterTrains) {
  auto c = tiny_config(32, 16);
  Generator<double> g(c);
  g.init(13);
  std::mt19937_64 rng(14);
  Tape<double> t;
  Binder<double> p(t, g.params(), true);
  auto x = t.constant(Tensor<double>::uniform({2, 3, 32, 32}, 0, 1, rng));
  auto target = t.constant(Tensor<double>::uniform({2, 3, 32, 32}, 0, 1, rng));
  auto out = g.forward(p, x);
  t.backward(mean(square(sub(out.image, target))));
  EXPECT_EQ(p.bound().size(), g.params().size());
  for (const auto& [name, v] : p.bound()) EXPECT_GT(t.grad(v).max_abs(), 0.0) << name;
}

TEST(GeneratorGrad, SgfmtLayer) {
  auto c = tiny_config(32, 16, 1);
  const std::vector<std::string> names{"sgfmt.pe",
                                       "sgfmt.embed.weight",
                                       "sgfmt.layer0.ln1.gain",
                                       "sgfmt.layer0.attn.q.weight",
                                       "sgfmt.layer0.attn.k.weight",
                                       "sgfmt.layer0.attn.v.weight",
                                       "sgfmt.layer0.attn.o.weight",
                                       "sgfmt.layer0.ffn.fc1.weight",
                                       "sgfmt.layer0.ffn.fc2.bias"};
  auto rep = check_with_params(
      c, {{2, 64, 2, 2}}, names,
      [](const Generator<double>& g, Binder<double>& p, const std::vector<Var<double>>& in) {
        return g.sgfmt(p, in[0]);
      },
      1);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(GeneratorGrad, CmsfftLayer) {
  auto c = tiny_config(16, 8, 1);
  const auto ch = c.channels();
  const std::vector<std::string> names{"cmsfft.layer0.head0.wq1", "cmsfft.layer0.head1.wq4",
                                       "cmsfft.layer0.head2.wk",  "cmsfft.layer0.head3.wv",
                                       "cmsfft.layer0.ln2.gain",  "cmsfft.layer0.mlp3.fc1.weight",
                                       "cmsfft.layer0.mlp1.fc2.bias"};
  std::vector<Shape> shapes;
  for (auto w : ch) shapes.push_back({2, 4, w});
  auto rep = check_with_params(
      c, shapes, names,
      [](const Generator<double>& g, Binder<double>& p, const std::vector<Var<double>>& in) {
        auto o = g.fusion_layer(p, 0, {in[0], in[1], in[2], in[3]});
        return concat<double>({o[0], o[1], o[2], o[3]}, 2);
      },
      2);
  EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(GeneratorGrad, FullTinyGenerator) {
  auto c = tiny_config(16, 8, 1);
  const std::vector<std::string> names{"enc.block1.conv1.weight", "enc.scale3.proj.weight", "enc.down4.bias",
                                       "enc.bottleneck.weight",   "sgfmt.pe",               "cmsfft.patch2.weight",
                                       "cmsfft.layer0.head0.wk",  "dec.block4.up.weight",   "dec.block1.conv2.weight",
                                       "dec.out.bias"};
  auto rep = check_with_params(
      c, {{1, 3, 16, 16}}, names,
      [](const Generator<double>& g, Binder<double>& p, const std::vector<Var<double>>& in) {
        return g.forward(p, in[0]).image;
      },
      3, 4);
  EXPECT_TRUE(rep.passed) << rep.message;
}
