#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "levit_unet/errors.hpp"
#include "levit_unet/grad_check.hpp"
#include "levit_unet/layers.hpp"
#include "levit_unet/ops.hpp"
#include "levit_unet/optim.hpp"

using levit::Shape;
using levit::Tensor;
namespace ops = levit::ops;

namespace {

Tensor random_tensor(Shape shape, std::mt19937& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(levit::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

void expect_grad_ok(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs,
                    levit::GradCheckOptions opt = {}) {
  auto report = levit::grad_check(fn, std::move(inputs), opt);
  EXPECT_TRUE(report.passed()) << report.summary();
  EXPECT_LT(report.max_rel_error, 1e-2);
}

}  // namespace

// ---- conv2d -----------------------------------------------------------------

TEST(Conv2d, ZeroInputGivesBias) {
  Tensor x({1, 1, 3, 3}, 0.0f);
  Tensor w({2, 1, 3, 3}, 0.7f);
  Tensor b({2}, std::vector<float>{0.5f, -2.0f});
  Tensor y = ops::conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
  for (int i = 0; i < 9; ++i) {
    EXPECT_EQ(y.data()[i], 0.5f);
    EXPECT_EQ(y.data()[9 + i], -2.0f);
  }
}

TEST(Conv2d, OneByOneIsScalarScale) {
  Tensor x({1, 1, 3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor w({1, 1, 1, 1}, std::vector<float>{2.0f});
  Tensor y = ops::conv2d(x, w, Tensor(), 1, 0);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(y.data()[i], 2.0f * x.data()[i]);
}

TEST(Conv2d, StridedOverlapCounts) {
  Tensor x({1, 1, 4, 4}, 1.0f);
  Tensor w({1, 1, 3, 3}, 1.0f);
  Tensor y = ops::conv2d(x, w, Tensor(), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.data()[0], 4.0f);
  EXPECT_EQ(y.data()[1], 6.0f);
  EXPECT_EQ(y.data()[2], 6.0f);
  EXPECT_EQ(y.data()[3], 9.0f);
}

TEST(Conv2d, ChannelMismatchIsConfigError) {
  Tensor x({1, 2, 4, 4}, 1.0f);
  Tensor w({1, 3, 3, 3}, 1.0f);
  EXPECT_THROW(ops::conv2d(x, w, Tensor(), 1, 1), levit::ConfigError);
}

TEST(Conv2d, Linearity) {
  std::mt19937 rng(10);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({2, 3, 7, 6}, rng);
    Tensor y = random_tensor({2, 3, 7, 6}, rng);
    const float a = 0.7f, b = -1.3f;
    std::vector<float> mix(x.numel());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x.data()[i] + b * y.data()[i];
    Tensor lhs = ops::conv2d(Tensor(x.shape(), mix), w, Tensor(), 2, 1);
    Tensor cx = ops::conv2d(x, w, Tensor(), 2, 1);
    Tensor cy = ops::conv2d(y, w, Tensor(), 2, 1);
    for (std::size_t i = 0; i < lhs.numel(); ++i) {
      EXPECT_NEAR(lhs.data()[i], a * cx.data()[i] + b * cy.data()[i], 1e-4);
    }
  }
}

TEST(Conv2d, GradCheck) {
  std::mt19937 rng(11);
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], in[2], 2, 1); },
                 {random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], in[2], 1, 0); },
                 {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3, 1, 1}, rng), random_tensor({5}, rng)});
}

// ---- batch_norm -------------------------------------------------------------

TEST(BatchNorm, NormalizedInputPassesThrough) {
  // per-channel mean 0, biased variance 1
  Tensor x({2, 1, 1, 2}, std::vector<float>{-1.0f, 1.0f, 1.0f, -1.0f});
  auto bn = levit::nn::BatchNorm::make(1);
  Tensor y = bn.forward(x, levit::nn::Mode::train);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937 rng(12);
  auto bn = levit::nn::BatchNorm::make(3);
  bn.gamma.mutable_data()[0] = 0.0f;
  bn.gamma.mutable_data()[1] = 0.0f;
  bn.gamma.mutable_data()[2] = 0.0f;
  bn.beta.mutable_data()[1] = 2.5f;
  Tensor y = bn.forward(random_tensor({2, 3, 2, 2}, rng), levit::nn::Mode::train);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 4; ++i) EXPECT_EQ(y.data()[(n * 3 + 1) * 4 + i], 2.5f);
  }
}

TEST(BatchNorm, TwoValueChannelNormalizesToPlusMinusOne) {
  Tensor x({2, 1, 1, 1}, std::vector<float>{1.0f, 3.0f});
  auto bn = levit::nn::BatchNorm::make(1);
  Tensor y = bn.forward(x, levit::nn::Mode::train);
  // batch mean 2, biased var 1
  EXPECT_NEAR(y.data()[0], -1.0f / std::sqrt(1.0f + 1e-5f), 1e-6);
  EXPECT_NEAR(y.data()[1], 1.0f / std::sqrt(1.0f + 1e-5f), 1e-6);
  // running stats: momentum 0.1 toward mean 2 and unbiased var 2
  EXPECT_NEAR(bn.running_mean.data()[0], 0.2f, 1e-6);
  EXPECT_NEAR(bn.running_var.data()[0], 0.9f + 0.2f, 1e-6);
}

TEST(BatchNorm, EvalModeIsFixedAffineAndStateless) {
  std::mt19937 rng(13);
  auto bn = levit::nn::BatchNorm::make(2);
  Tensor x = random_tensor({3, 2, 2, 2}, rng);
  Tensor once = bn.forward(x, levit::nn::Mode::eval);
  Tensor twice = bn.forward(once, levit::nn::Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(twice.data()[i], once.data()[i], 2e-5);
  EXPECT_EQ(bn.running_mean.data()[0], 0.0f);
  EXPECT_EQ(bn.running_var.data()[1], 1.0f);
}

TEST(BatchNorm, ChannelMismatchIsConfigError) {
  auto bn = levit::nn::BatchNorm::make(4);
  EXPECT_THROW(bn.forward(Tensor({1, 3, 2, 2}, 1.0f), levit::nn::Mode::train), levit::ConfigError);
}

TEST(BatchNorm, GradCheckTrainAndEval) {
  std::mt19937 rng(14);
  for (bool training : {true, false}) {
    Tensor rm({3}, 0.1f), rv({3}, 0.8f);
    expect_grad_ok(
        [&](const std::vector<Tensor>& in) {
          return ops::batch_norm(in[0], in[1], in[2], rm, rv, training, 0.1f, 1e-5f);
        },
        {random_tensor({2, 3, 2, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
    expect_grad_ok(
        [&](const std::vector<Tensor>& in) {
          return ops::batch_norm(in[0], in[1], in[2], rm, rv, training, 0.1f, 1e-5f);
        },
        {random_tensor({2, 4, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  }
}

// ---- softmax ----------------------------------------------------------------

TEST(Softmax, UniformOnEqualInputs) {
  Tensor y = ops::softmax(Tensor({3}, 0.0f), 0);
  for (float v : y.data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Softmax, StableForLargeLogits) {
  Tensor y = ops::softmax(Tensor({2}, std::vector<float>{50.0f, 1050.0f}), -1);
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_EQ(y.data()[1], 1.0f);
}

TEST(Softmax, TwoValueHandEvaluation) {
  Tensor y = ops::softmax(Tensor({2}, std::vector<float>{1.0f, 2.0f}), 0);
  EXPECT_NEAR(y.data()[0], 1.0 / (1.0 + std::exp(1.0)), 1e-6);
  EXPECT_NEAR(y.data()[1], std::exp(1.0) / (1.0 + std::exp(1.0)), 1e-6);
  EXPECT_NEAR(y.data()[0], 0.2689, 1e-4);
  EXPECT_NEAR(y.data()[1], 0.7311, 1e-4);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  std::mt19937 rng(15);
  std::uniform_int_distribution<int> len(1, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    const int a = len(rng) % 5 + 1, b = len(rng);
    const int axis = trial % 2;
    Tensor x = random_tensor({a, b}, rng, -30.0f, 30.0f);
    Tensor y = ops::softmax(x, axis);
    const int outer = axis == 0 ? b : a, inner_len = axis == 0 ? a : b;
    for (int o = 0; o < outer; ++o) {
      double s = 0.0;
      for (int l = 0; l < inner_len; ++l) {
        const float v = axis == 0 ? y.data()[l * b + o] : y.data()[o * b + l];
        ASSERT_GE(v, 0.0f);
        s += v;
      }
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Softmax, GradCheck) {
  std::mt19937 rng(16);
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::softmax(in[0], -1); }, {random_tensor({3, 5}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::softmax(in[0], 1); }, {random_tensor({2, 4, 3}, rng)});
}

// ---- bilinear_resize ----------------------------------------------------------

namespace {

// Straight evaluation of the half-pixel bilinear formula, in double.
double bilinear_reference(const std::vector<float>& img, int h, int w, int oy, int ox, int out_h, int out_w) {
  auto src_coord = [](int o, int in, int out) {
    double s = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    return s < 0.0 ? 0.0 : s;
  };
  const double sy = src_coord(oy, h, out_h), sx = src_coord(ox, w, out_w);
  const int y0 = std::min(static_cast<int>(sy), h - 1), x0 = std::min(static_cast<int>(sx), w - 1);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ly = sy - y0, lx = sx - x0;
  auto at = [&](int y, int x) { return static_cast<double>(img[static_cast<std::size_t>(y) * w + x]); };
  return (1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1));
}

}  // namespace

TEST(BilinearResize, SameSizeIsBitIdentical) {
  std::mt19937 rng(17);
  Tensor x = random_tensor({2, 3, 5, 7}, rng);
  Tensor y = ops::bilinear_resize(x, 5, 7);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(BilinearResize, ConstantsArePreserved) {
  Tensor x({1, 2, 4, 4}, 0.375f);
  for (auto [h, w] : {std::pair{14, 14}, std::pair{3, 9}, std::pair{1, 1}, std::pair{17, 5}}) {
    Tensor y = ops::bilinear_resize(x, h, w);
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.375f);
  }
}

TEST(BilinearResize, TwoByTwoToFourByFour) {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor y = ops::bilinear_resize(x, 4, 4);
  const float expected[16] = {1.0f, 1.25f, 1.75f, 2.0f, 1.5f, 1.75f, 2.25f, 2.5f,
                              2.5f, 2.75f, 3.25f, 3.5f, 3.0f, 3.25f, 3.75f, 4.0f};
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[i], expected[i], 1e-6) << i;
  std::vector<float> img{1, 2, 3, 4};
  for (int oy = 0; oy < 4; ++oy) {
    for (int ox = 0; ox < 4; ++ox) EXPECT_NEAR(y.data()[oy * 4 + ox], bilinear_reference(img, 2, 2, oy, ox, 4, 4), 1e-6);
  }
}

TEST(BilinearResize, NonIntegerRatioMatchesReference) {
  std::mt19937 rng(18);
  for (auto [h, w, oh, ow] : {std::tuple{4, 4, 14, 14}, std::tuple{7, 7, 14, 14}, std::tuple{14, 14, 4, 4},
                              std::tuple{5, 3, 8, 11}}) {
    Tensor x = random_tensor({1, 1, h, w}, rng);
    std::vector<float> img(x.data().begin(), x.data().end());
    Tensor y = ops::bilinear_resize(x, oh, ow);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        EXPECT_NEAR(y.data()[oy * ow + ox], bilinear_reference(img, h, w, oy, ox, oh, ow), 1e-6);
      }
    }
  }
}

TEST(BilinearResize, GradCheck) {
  std::mt19937 rng(19);
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::bilinear_resize(in[0], 7, 5); },
                 {random_tensor({1, 2, 4, 3}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::bilinear_resize(in[0], 2, 3); },
                 {random_tensor({1, 1, 5, 7}, rng)});
}

// ---- activations ----------------------------------------------------------------

TEST(Activations, ReluAndHardswishValues) {
  Tensor r = ops::relu(Tensor({2}, std::vector<float>{-1.0f, 2.0f}));
  EXPECT_EQ(r.data()[0], 0.0f);
  EXPECT_EQ(r.data()[1], 2.0f);
  Tensor h = ops::hardswish(Tensor({3}, std::vector<float>{-3.0f, 3.0f, 1.0f}));
  EXPECT_EQ(h.data()[0], 0.0f);
  EXPECT_EQ(h.data()[1], 3.0f);
  EXPECT_NEAR(h.data()[2], 4.0f / 6.0f, 1e-7);
}

TEST(Activations, GradCheckAwayFromKinks) {
  // Values kept clear of relu's 0 and hardswish's +-3 so the finite difference
  // never straddles a kink.
  Tensor x({6}, std::vector<float>{-0.9f, -0.4f, 0.3f, 0.8f, -2.5f, 2.2f});
  auto rep = levit::grad_check([](const std::vector<Tensor>& in) { return ops::relu(in[0]); }, {x});
  EXPECT_TRUE(rep.passed()) << rep.summary();
  EXPECT_LT(rep.max_rel_error, 1e-6);
  Tensor y({6}, std::vector<float>{-0.9f, -0.4f, 0.3f, 0.8f, -2.5f, 2.2f});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::hardswish(in[0]); }, {y});
}

// ---- linear & attention plumbing ------------------------------------------------

TEST(Linear, GradCheck) {
  std::mt19937 rng(20);
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::linear(in[0], in[1], in[2]); },
                 {random_tensor({2, 3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)});
}

TEST(Plumbing, GradChecks) {
  std::mt19937 rng(21);
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::batched_matmul(in[0], in[1], false); },
                 {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::batched_matmul(in[0], in[1], true); },
                 {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::merge_heads(ops::split_heads(in[0], 2), 2); },
                 {random_tensor({2, 3, 4}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::split_heads(in[0], 2); }, {random_tensor({2, 3, 4}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::concat({in[0], in[1]}, 1); },
                 {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 1, 2, 2}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); },
                 {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::scale(in[0], -0.75f); }, {random_tensor({4}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::subsample_tokens(in[0], 3, 3); },
                 {random_tensor({2, 9, 2}, rng)});
  expect_grad_ok([](const std::vector<Tensor>& in) { return ops::tokens_to_map(ops::map_to_tokens(in[0]), 2, 3); },
                 {random_tensor({2, 3, 2, 3}, rng)});
  std::vector<int> index{0, 1, 2, 1, 0, 3};
  expect_grad_ok(
      [&](const std::vector<Tensor>& in) { return ops::add_attention_bias(in[0], in[1], index); },
      {random_tensor({4, 2, 3}, rng), random_tensor({2, 4}, rng)});
}

TEST(Plumbing, TokensRoundTripAndSubsampleGrid) {
  std::mt19937 rng(22);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  Tensor back = ops::tokens_to_map(ops::map_to_tokens(x), 4, 5);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), back.data().begin()));
  Tensor t = ops::map_to_tokens(x);
  EXPECT_EQ(t.at({1, 2 * 5 + 3, 1}), x.at({1, 1, 2, 3}));
  Tensor s = ops::subsample_tokens(Tensor({1, 49, 1}, 0.0f), 7, 7);
  EXPECT_EQ(s.shape(), (Shape{1, 16, 1}));
}

// ---- adam -----------------------------------------------------------------------

TEST(Adam, ZeroGradientZeroDecayLeavesParameter) {
  Tensor p = Tensor::parameter({2}, {1.0f, -2.0f});
  levit::nn::Adam adam({{"p", p, true}}, {.lr = 0.1f, .weight_decay = 0.0f});
  ops::scale(ops::sum(p), 0.0f).backward();
  adam.step();
  EXPECT_EQ(p.data()[0], 1.0f);
  EXPECT_EQ(p.data()[1], -2.0f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::parameter({1}, {1.0f});
  levit::nn::Adam adam({{"p", p, true}}, {.lr = 0.1f, .weight_decay = 0.0f});
  ops::scale(ops::sum(p), 0.5f).backward();  // grad 0.5
  adam.step();
  // bias-corrected m/sqrt(v) = g/|g|
  EXPECT_NEAR(p.data()[0], 1.0f - 0.1f * 0.5f / (0.5f + 1e-8f), 1e-6);
}

TEST(Adam, DecreasesConvexQuadratic) {
  Tensor p = Tensor::parameter({1}, {1.0f});
  levit::nn::Adam adam({{"p", p, true}}, {.lr = 0.1f, .weight_decay = 0.0f});
  auto loss = [&] {
    Tensor x = p;
    return ops::batched_matmul(ops::reshape(x, {1, 1, 1}), ops::reshape(x, {1, 1, 1}), false);
  };
  // scalar simulation of two Adam steps on x^2 from x = 1
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = 2.0 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  const float before = loss().data()[0];
  for (int i = 0; i < 2; ++i) {
    adam.zero_grad();
    ops::sum(loss()).backward();
    adam.step();
  }
  EXPECT_LT(loss().data()[0], before);
  EXPECT_NEAR(p.data()[0], x, 1e-6);
}

TEST(Adam, NanGradientNamesParameter) {
  Tensor p = Tensor::parameter({1}, {1.0f});
  levit::nn::Adam adam({{"decoder.up1.conv_a.weight", p, true}}, {});
  ops::scale(ops::sum(p), std::nanf("")).backward();
  try {
    adam.step();
    FAIL() << "expected NumericError";
  } catch (const levit::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.up1.conv_a.weight"), std::string::npos);
  }
  EXPECT_EQ(p.data()[0], 1.0f);
}

TEST(Adam, DecoupledWeightDecay) {
  Tensor p = Tensor::parameter({1}, {2.0f});
  levit::nn::Adam adam({{"p", p, true}}, {.lr = 0.01f, .weight_decay = 0.5f});
  ops::scale(ops::sum(p), 0.0f).backward();
  adam.step();
  EXPECT_NEAR(p.data()[0], 2.0f - 0.01f * 0.5f * 2.0f, 1e-7);
}

// ---- determinism ---------------------------------------------------------------------

TEST(Determinism, RepeatedOpSequenceIsBitIdentical) {
  auto run = [] {
    std::mt19937 rng(99);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor y = ops::hardswish(ops::conv2d(x, w, Tensor(), 2, 1));
    y = ops::softmax(ops::bilinear_resize(y, 7, 7), 1);
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, ReportsFailingCoordinates) {
  // A deliberately wrong backward must be caught.
  auto broken = [](const std::vector<Tensor>& in) {
    auto xn = in[0].node();
    std::vector<float> y(in[0].data().begin(), in[0].data().end());
    for (auto& v : y) v *= 3.0f;
    return levit::make_op_result(in[0].shape(), std::move(y), {in[0]}, [xn](levit::detail::Node& self) {
      auto& dx = xn->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0f * self.grad[i];
    });
  };
  auto rep = levit::grad_check(broken, {Tensor({3}, std::vector<float>{0.5f, -0.2f, 0.9f})});
  EXPECT_FALSE(rep.passed());
  EXPECT_EQ(rep.failures.size(), 3u);
}
