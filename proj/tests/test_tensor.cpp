#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <unordered_set>

#include "bbed/autograd.hpp"
#include "bbed/ops.hpp"
#include "gradient_cases.hpp"
#include "test_util.hpp"

using namespace bbed;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.data().size(), shape_numel(t.shape()));
}

TEST(Tensor, DetachSharesStorageButNotHistory) {
  Tensor a({2}, std::vector<float>{1, 2});
  a.set_requires_grad();
  Tensor d = a.detach();
  EXPECT_FALSE(d.requires_grad());
  d.data()[0] = 5.0f;
  EXPECT_EQ(a.data()[0], 5.0f);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  Tensor x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 1, 1}, std::vector<float>{1.0f});
  auto y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(Conv2d, HandSum) {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor w({1, 1, 2, 2}, std::vector<float>{1, 1, 1, 1});
  auto y = conv2d(x, w, 1, 0);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_FLOAT_EQ(y.item(), 10.0f);
}

TEST(Conv2d, OutputSizeFormula) {
  Tensor x({2, 3, 7, 5});
  Tensor w({4, 3, 3, 2});
  auto y = conv2d(x, w, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, (7 + 2 - 3) / 2 + 1, (5 + 2 - 2) / 2 + 1}));
}

TEST(Conv2d, Preconditions) {
  Tensor x({1, 1, 3, 3});
  Tensor w({1, 1, 1, 1});
  EXPECT_THROW(conv2d(x, w, 0, 0), ShapeError);
  EXPECT_THROW(conv2d(x, w, 1, -1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({1, 2, 1, 1}), 1, 0), ShapeError);
}

TEST(BatchNorm, StatisticsModeIdentity) {
  std::mt19937_64 rng(3);
  auto x = fixtures::random_tensor({2, 3, 2, 2}, rng);
  Tensor gamma = Tensor::ones({3}), beta = Tensor::zeros({3});
  Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
  auto y = batchnorm(x, gamma, beta, rm, rv, BatchNormMode::statistics, 0.0f);
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(BatchNorm, MinibatchNormalizesWithPopulationStd) {
  Tensor x({2, 1}, std::vector<float>{2.0f, 4.0f});
  Tensor gamma = Tensor::ones({1}), beta = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
  auto y = batchnorm(x, gamma, beta, rm, rv, BatchNormMode::minibatch, 0.0f, 0.1f);
  EXPECT_FLOAT_EQ(y.data()[0], -1.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 1.0f);
  // running stats move 10% towards the batch mean 3 and variance 1
  EXPECT_FLOAT_EQ(rm.data()[0], 0.3f);
  EXPECT_FLOAT_EQ(rv.data()[0], 1.0f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(4);
  auto x = fixtures::random_tensor({3, 2, 4, 4}, rng);
  Tensor gamma = Tensor::zeros({2}), beta = Tensor::full({2}, 5.0f);
  Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
  auto y = batchnorm(x, gamma, beta, rm, rv, BatchNormMode::statistics);
  for (float v : y.data()) EXPECT_EQ(v, 5.0f);
}

TEST(BatchNorm, NegativeRunningVarianceRejected) {
  Tensor x({1, 1}, std::vector<float>{1.0f});
  Tensor gamma = Tensor::ones({1}), beta = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv({1}, std::vector<float>{-1.0f});
  EXPECT_THROW(batchnorm(x, gamma, beta, rm, rv, BatchNormMode::statistics), std::invalid_argument);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Tensor z({1, 2}, std::vector<float>{0, 0});
  std::vector<int> labels{0};
  EXPECT_NEAR(softmax_cross_entropy(z, labels).item(), std::log(2.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, LargeLogitsDoNotOverflow) {
  Tensor z({1, 2}, std::vector<float>{1000.0f, 0.0f});
  std::vector<int> labels{0};
  auto loss = softmax_cross_entropy(z, labels);
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_NEAR(loss.item(), 0.0, 1e-6);
}

TEST(SoftmaxCrossEntropy, HandSoftmax) {
  Tensor z({1, 2}, std::vector<float>{0.2f, -0.2f});
  std::vector<int> labels{0};
  // -ln(1 / (1 + e^-0.4))
  const double expected = std::log1p(std::exp(-0.4));
  EXPECT_NEAR(softmax_cross_entropy(z, labels).item(), expected, 1e-6);
  EXPECT_NEAR(expected, 0.5130, 1e-4);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Tensor z({1, 2});
  std::vector<int> labels{2};
  EXPECT_THROW(softmax_cross_entropy(z, labels), std::out_of_range);
}

TEST(Backward, SquareDerivative) {
  Tensor x = Tensor::scalar(3.0f);
  x.set_requires_grad();
  backward(mul(x, x));
  ASSERT_TRUE(x.has_grad());
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Backward, IdentityDerivative) {
  Tensor x = Tensor::scalar(7.0f);
  x.set_requires_grad();
  backward(x);
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
}

TEST(Backward, SumRule) {
  Tensor x = Tensor::scalar(1.5f), y = Tensor::scalar(-2.0f);
  x.set_requires_grad();
  y.set_requires_grad();
  backward(add(x, y));
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
  EXPECT_FLOAT_EQ(y.grad()[0], 1.0f);
}

TEST(Backward, RepeatedUseAccumulates) {
  Tensor x = Tensor::scalar(2.0f);
  x.set_requires_grad();
  auto y = add(add(x, x), scale(x, 3.0f));
  backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 5.0f);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x({2}, std::vector<float>{1, 2});
  x.set_requires_grad();
  EXPECT_THROW(backward(scale(x, 2.0f)), ShapeError);
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  std::mt19937_64 rng(11);
  auto x = fixtures::random_tensor({2, 3}, rng);
  x.set_requires_grad();
  auto a = relu(x);
  auto b = mul(a, x);
  auto c = add(b, a);
  auto loss = sum(c);
  auto tape = Tape::record(loss);
  std::unordered_set<const TensorImpl*> seen;
  for (const auto& e : tape.entries()) {
    for (const auto* in : e.inputs) {
      if (in == x.impl().get()) continue;
      EXPECT_TRUE(seen.count(in)) << e.op << " consumed an input recorded later";
    }
    EXPECT_TRUE(seen.insert(e.output).second) << "operation recorded twice";
  }
  EXPECT_EQ(tape.entries().size(), 4u);
  EXPECT_EQ(tape.entries().back().output, loss.impl().get());
}

TEST(Backward, RepeatableOnSameGraph) {
  Tensor x({1, 2}, std::vector<float>{0.5f, -1.0f});
  x.set_requires_grad();
  Tensor w({2, 2}, std::vector<float>{1, 2, 3, 4});
  auto z = linear(x, w, Tensor());
  const std::vector<float> e0{1, 0}, e1{0, 1};
  backward(z, e0);
  auto g0 = std::vector<float>(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(z, e1);
  EXPECT_EQ(g0, (std::vector<float>{1, 2}));
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{3, 4}));
}

TEST(SignSte, ForwardAndStraightThroughBackward) {
  Tensor x({4}, std::vector<float>{0.5f, -0.2f, 0.0f, 3.0f});
  x.set_requires_grad();
  auto s = sign_ste(x);
  EXPECT_EQ(s.to_vector(), (std::vector<float>{1, -1, 1, 1}));
  const std::vector<float> seed{2, 3, 4, 5};
  backward(s, seed);
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{2, 3, 4, 0}));
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(8);
  auto x = fixtures::random_tensor({8}, rng);
  EXPECT_LT(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x, 1e-3f), 1e-4);
}

TEST(GradCheck, ConstantFunction) {
  Tensor x({3}, std::vector<float>{1, 2, 3});
  EXPECT_EQ(grad_check([](const Tensor&) { return Tensor::scalar(4.0f); }, x, 1e-3f), 0.0);
}

TEST(GradCheck, ReluAwayFromKink) {
  Tensor x({4}, std::vector<float>{0.7f, -0.4f, 1.3f, -2.0f});
  EXPECT_LT(grad_check([](const Tensor& v) { return sum(relu(v)); }, x, 1e-3f), 1e-4);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  Tensor x({1});
  EXPECT_THROW(grad_check([](const Tensor& v) { return sum(v); }, x, 0.0f), std::invalid_argument);
}

TEST(Ops, NonFiniteOutputIsAnError) {
  Tensor x({2}, std::vector<float>{3e38f, 3e38f});
  EXPECT_THROW(scale(x, 10.0f), NumericError);
}

TEST(Ops, ForwardIsDeterministic) {
  std::mt19937_64 rng(5);
  auto x = fixtures::random_tensor({2, 3, 8, 8}, rng);
  auto w = fixtures::random_tensor({4, 3, 3, 3}, rng);
  auto a = conv2d(x, w, 1, 1), b = conv2d(x, w, 1, 1);
  EXPECT_EQ(a.to_vector(), b.to_vector());
}

TEST(Sgd, MomentumUpdate) {
  Tensor w({1}, std::vector<float>{1.0f});
  w.set_requires_grad();
  Sgd opt({w}, 0.1f, 0.9f);
  backward(mul(w, w));  // grad 2
  opt.step();
  EXPECT_FLOAT_EQ(w.data()[0], 0.8f);
  opt.zero_grad();
  backward(mul(w, w));  // grad 1.6, velocity 0.9*2 + 1.6
  opt.step();
  EXPECT_FLOAT_EQ(w.data()[0], 0.8f - 0.1f * 3.4f);
}

class GradientProperty : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientProperty, MatchesFiniteDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  for (int trial = 0; trial < 5; ++trial) {
    auto result = fixtures::run_gradient_case(GetParam(), rng);
    EXPECT_LT(result.error, 1e-3) << result.name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradientProperty,
                         ::testing::Range<std::size_t>(0, fixtures::gradient_op_names().size()),
                         [](const auto& info) {
                           auto n = fixtures::gradient_op_names()[info.param];
                           for (auto& ch : n) {
                             if (ch == '.') ch = '_';
                           }
                           return n;
                         });
