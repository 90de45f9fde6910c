#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "uieforge/grad_check.hpp"
#include "uieforge/ops.hpp"
#include "test_util.hpp"

using namespace uieforge;
using namespace uieforge::testing;

namespace {

using TapeD = Tape<double>;
using VarD = Var<double>;

}  // namespace

TEST(Softmax, UniformInputIsUniform) {
  TapeD t;
  auto y = softmax(t.constant(Tensor<double>({3}, 0.0)), 0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneOnChosenAxis) {
  std::mt19937_64 rng(3);
  TapeD t;
  auto x = t.constant(Tensor<double>::uniform({2, 5, 3}, -20, 20, rng));
  auto y = softmax(x, 1);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const double v = y.value()[(a * 5 + k) * 3 + c];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, JacobianRowsSumToZeroAtUniformInput) {
  // d/dx_j sum_i softmax_i = 0, so any constant upstream gradient vanishes.
  TapeD t;
  auto x = t.variable(Tensor<double>({4}, 0.0));
  auto y = softmax(x, 0);
  t.backward(sum(y));
  const auto gx = t.grad(x);
  for (auto g : gx.storage()) EXPECT_NEAR(g, 0.0, 1e-15);
  // Single output: gradient equals the Jacobian row diag(p) - p p^T.
  TapeD t2;
  auto x2 = t2.variable(Tensor<double>({4}, 0.0));
  auto y2 = softmax(x2, 0);
  t2.backward(slice(y2, 0, 1, 1));
  const auto g = t2.grad(x2);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g[j], (j == 1 ? 0.25 : 0.0) - 0.25 * 0.25, 1e-15);
}

TEST(LayerNorm, ConstantVectorGivesZeros) {
  TapeD t;
  auto y = layer_norm(t.constant(Tensor<double>({1, 6}, 3.5)));
  for (auto v : y.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, ZeroMeanUnitVariancePerChannel) {
  std::mt19937_64 rng(5);
  TapeD t;
  auto y = instance_norm(t.constant(Tensor<double>::uniform({2, 3, 8, 8}, -4, 9, rng)));
  for (std::size_t p = 0; p < 6; ++p) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 64; ++i) m += y.value()[p * 64 + i];
    m /= 64;
    for (std::size_t i = 0; i < 64; ++i) v += std::pow(y.value()[p * 64 + i] - m, 2);
    v /= 64;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Normalization, Idempotent) {
  // The epsilon guard makes this exact only up to O(eps * |1/var - 1|), so
  // inputs are drawn with near-unit variance.
  std::mt19937_64 rng(6);
  for (int s = 0; s < 5; ++s) {
    TapeD t;
    auto x = t.constant(Tensor<double>::normal({2, 4, 16, 16}, 0.3, 1.0, rng));
    auto once = instance_norm(x);
    EXPECT_LT(max_abs_diff(instance_norm(once).value(), once.value()), 1e-5);
    auto ln = layer_norm(t.constant(Tensor<double>::normal({4, 256}, -0.2, 1.0, rng)));
    EXPECT_LT(max_abs_diff(layer_norm(ln).value(), ln.value()), 1e-5);
  }
}

TEST(Resampling, UpsampleThenPoolIsIdentity) {
  std::mt19937_64 rng(7);
  TapeD t;
  auto x = t.constant(Tensor<double>::uniform({2, 3, 5, 7}, -1, 1, rng));
  EXPECT_EQ(avg_pool(upsample_nearest(x, 2), 2).value(), x.value());
  EXPECT_EQ(avg_pool(upsample_nearest(x, 4), 4).value(), x.value());
}

TEST(ShapeErrors, NameOpAndShapes) {
  TapeD t;
  auto a = t.constant(Tensor<double>({4, 5}));
  auto b = t.constant(Tensor<double>({4, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    EXPECT_NE(msg.find("[4x3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(conv2d(t.constant(Tensor<double>({1, 2, 4, 4})), t.constant(Tensor<double>({1, 3, 3, 3})),
                      std::nullopt, 1, 1),
               ShapeError);
}

TEST(Tape, NonParticipatingVariableHasZeroGradient) {
  TapeD t;
  auto a = t.variable(Tensor<double>({3}, 2.0));
  auto unused = t.variable(Tensor<double>({3}, 5.0));
  auto loss = sum(square(a));
  t.backward(loss);
  const auto ga = t.grad(a);
  const auto gu = t.grad(unused);
  for (auto g : ga.storage()) EXPECT_DOUBLE_EQ(g, 4.0);
  for (auto g : gu.storage()) EXPECT_EQ(g, 0.0);
  EXPECT_FALSE(t.has_grad(unused));
}

TEST(Conv2d, SamePaddingKeepsSize) {
  TapeD t;
  auto x = t.constant(Tensor<double>({1, 2, 8, 8}, 1.0));
  auto w = t.constant(Tensor<double>({4, 2, 3, 3}, 1.0));
  auto y = conv2d(x, w, std::nullopt, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 8, 8}));
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 4, 4), 18.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0, 0), 8.0);
  auto s = conv2d(x, w, std::nullopt, 2, 1);
  EXPECT_EQ(s.shape(), (Shape{1, 4, 4, 4}));
}

// Gradient checks --------------------------------------------------------------

TEST(GradCheck, MatmulRandom4x5By5x3) {
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return matmul(v[0], v[1]); },
              uniform_inputs({{4, 5}, {5, 3}}));
}

TEST(GradCheck, BatchedAndSharedMatmul) {
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return matmul(v[0], v[1]); },
              uniform_inputs({{2, 3, 4}, {2, 4, 5}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return matmul(v[0], v[1]); },
              uniform_inputs({{2, 3, 4}, {4, 5}}));
}

TEST(GradCheck, Conv3x3On1x2x8x8) {
  expect_grad(
      [](TapeD&, const std::vector<VarD>& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
      uniform_inputs({{1, 2, 8, 8}, {3, 2, 3, 3}, {3}}));
}

TEST(GradCheck, StridedAndPatchConv) {
  expect_grad(
      [](TapeD&, const std::vector<VarD>& v) { return conv2d(v[0], v[1], std::nullopt, 2, 1); },
      uniform_inputs({{2, 2, 6, 6}, {3, 2, 3, 3}}));
  expect_grad(
      [](TapeD&, const std::vector<VarD>& v) { return conv2d(v[0], v[1], std::nullopt, 4, 0); },
      uniform_inputs({{1, 2, 8, 8}, {3, 2, 4, 4}}));
  expect_grad(
      [](TapeD&, const std::vector<VarD>& v) { return conv2d(v[0], v[1], v[2], 1, 0); },
      uniform_inputs({{2, 3, 4, 4}, {5, 3, 1, 1}, {5}}));
}

TEST(GradCheck, ElementwiseBinary) {
  auto s = uniform_inputs({{3, 4}, {3, 4}}, 0.5, 2.0);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return add(v[0], v[1]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return sub(v[0], v[1]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return mul(v[0], v[1]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return div(v[0], v[1]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return atan2(v[0], v[1]); },
              uniform_inputs({{3, 4}, {3, 4}}, -2, 2));
}

TEST(GradCheck, ElementwiseUnary) {
  auto s = uniform_inputs({{4, 6}}, -2, 2);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return leaky_relu(v[0]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return sigmoid(v[0]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return square(v[0]); }, s);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return abs(v[0]); }, s);
  auto pos = uniform_inputs({{4, 6}}, 0.1, 3);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return sqrt(v[0]); }, pos);
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return log_clamped(v[0], 1e-8); }, pos);
}

TEST(GradCheck, SoftmaxAndNorms) {
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return softmax(v[0], 1); },
              uniform_inputs({{2, 5, 3}}, -3, 3));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return layer_norm(v[0]); },
              uniform_inputs({{3, 7}}, -3, 3));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return layer_norm(v[0], v[1], v[2]); },
              uniform_inputs({{3, 7}, {7}, {7}}, -3, 3));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return instance_norm(v[0]); },
              uniform_inputs({{2, 2, 4, 4}}, -3, 3));
}

TEST(GradCheck, StructuralAndResampling) {
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return upsample_nearest(v[0], 2); },
              uniform_inputs({{1, 2, 3, 3}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return avg_pool(v[0], 2); },
              uniform_inputs({{1, 2, 4, 6}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return concat<double>({v[0], v[1]}, 1); },
              uniform_inputs({{2, 2, 3}, {2, 4, 3}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return slice(v[0], 2, 1, 2); },
              uniform_inputs({{2, 2, 4}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return transpose(v[0]); },
              uniform_inputs({{2, 3, 4}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return add_bias(v[0], v[1], 1); },
              uniform_inputs({{2, 3, 4}, {3}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return mul_bias(v[0], v[1], 2); },
              uniform_inputs({{2, 3, 4}, {4}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return sum_axis(v[0], 1); },
              uniform_inputs({{2, 3, 4}}));
  expect_grad([](TapeD&, const std::vector<VarD>& v) { return mean(v[0]); }, uniform_inputs({{2, 3, 4}}));
}

TEST(GradCheck, KinkIsResampledNotFailed) {
  // First draw sits exactly on the rectifier kink; the checker must redraw.
  int calls = 0;
  InputSampler<double> sampler = [&calls](std::mt19937_64& rng) {
    if (calls++ == 0) return std::vector<Tensor<double>>{Tensor<double>({3}, 0.0)};
    return std::vector<Tensor<double>>{Tensor<double>::uniform({3}, 0.5, 1.0, rng)};
  };
  auto rep = grad_check<double>([](TapeD&, const std::vector<VarD>& v) { return leaky_relu(v[0]); },
                                sampler, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_GE(rep.resamples, 1);
}

TEST(GradCheck, PerturbationAcrossKinkIsResampled) {
  // The first draw is outside the kink margin but within one finite-difference step of it.
  int calls = 0;
  InputSampler<double> sampler = [&calls](std::mt19937_64& rng) {
    if (calls++ == 0) return std::vector<Tensor<double>>{Tensor<double>({1}, 3e-6)};
    return std::vector<Tensor<double>>{Tensor<double>::uniform({1}, 0.5, 1.0, rng)};
  };
  GradCheckOptions opt;
  opt.kink_margin = 1e-6;
  opt.step = 1e-5;
  auto rep = grad_check<double>([](TapeD&, const std::vector<VarD>& v) { return abs(v[0]); }, sampler, 1e-6, opt);
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_GE(rep.resamples, 1);
}

TEST(GradCheck, DetectsWrongBackward) {
  // Negative control: an op whose reverse pass is off by a factor.
  auto bad = [](TapeD&, const std::vector<VarD>& v) {
    return elementwise(v[0], [](double x) { return x * x; }, [](double x) { return 3 * x; });
  };
  auto rep = grad_check<double>(bad, uniform_inputs({{5}}), 1e-5);
  EXPECT_FALSE(rep.passed);
}
