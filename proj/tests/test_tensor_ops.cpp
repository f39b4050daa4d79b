#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lesionseg/ops.hpp"
#include "testutil.hpp"

using lesionseg::Rng;
using lesionseg::RunMode;
using lesionseg::Shape;
using lesionseg::ShapeError;
using lesionseg::Tensor;
namespace ops = lesionseg::ops;
using testutil::expect_grad_close;
using testutil::fd_gradient;
using testutil::random_tensor;

namespace {

template <typename T>
ops::ConvKernel<T> random_kernel(std::size_t cout, std::size_t cin, std::mt19937_64& rng) {
  return ops::ConvKernel<T>(testutil::random_tensor<T>({cout, cin, 3, 3, 3}, rng),
                            testutil::random_tensor<T>({cout}, rng));
}

}  // namespace

TEST(Conv3d, ZeroInputGivesBias) {
  std::mt19937_64 rng(1);
  auto kernel = random_kernel<float>(3, 2, rng);
  Tensor<float> input({2, 4, 5, 6});
  auto out = ops::conv3d_forward(input, kernel);
  ASSERT_EQ(out.shape(), (Shape{3, 4, 5, 6}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4 * 5 * 6; ++i)
      EXPECT_FLOAT_EQ(out[c * 120 + i], kernel.bias[c]);
}

TEST(Conv3d, CentralIdentityKernel) {
  std::mt19937_64 rng(2);
  auto input = random_tensor<float>({1, 5, 5, 5}, rng);
  ops::ConvKernel<float> kernel(Tensor<float>({1, 1, 3, 3, 3}), Tensor<float>({1}));
  kernel.weights(std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{1},
                 std::size_t{1}) = 1.0f;
  auto out = ops::conv3d_forward(input, kernel);
  for (std::size_t i = 0; i < input.size(); ++i) EXPECT_FLOAT_EQ(out[i], input[i]);
}

TEST(Conv3d, MatchesNaiveLoopReference) {
  std::mt19937_64 rng(3);
  auto input = random_tensor<float>({2, 3, 3, 3}, rng);
  auto kernel = random_kernel<float>(4, 2, rng);
  auto fast = ops::conv3d_forward(input, kernel);
  auto naive = testutil::naive_conv3d(input, kernel);
  EXPECT_LT(testutil::max_rel_diff(fast, naive), 1e-5f);

  // larger, non-cubic case
  auto input2 = random_tensor<float>({3, 6, 5, 7}, rng);
  auto kernel2 = random_kernel<float>(5, 3, rng);
  EXPECT_LT(testutil::max_rel_diff(ops::conv3d_forward(input2, kernel2),
                                   testutil::naive_conv3d(input2, kernel2)),
            1e-5f);
}

TEST(Conv3d, SamePaddingPreservesSpatialShape) {
  std::mt19937_64 rng(4);
  for (Shape s : {Shape{1, 1, 1, 1}, Shape{2, 2, 3, 4}, Shape{1, 7, 1, 2}}) {
    auto input = random_tensor<float>(s, rng);
    auto kernel = random_kernel<float>(2, s[0], rng);
    auto out = ops::conv3d_forward(input, kernel);
    EXPECT_EQ(out.shape(), (Shape{2, s[1], s[2], s[3]}));
  }
}

TEST(Conv3d, ChannelMismatchNamesBothShapes) {
  std::mt19937_64 rng(5);
  auto kernel = random_kernel<float>(3, 2, rng);
  Tensor<float> input({4, 3, 3, 3});
  try {
    ops::conv3d_forward(input, kernel);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[4,3,3,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2,3,3,3]"), std::string::npos) << msg;
  }
}

TEST(Conv3dBackward, ZeroUpstreamAndLinearity) {
  std::mt19937_64 rng(6);
  auto input = random_tensor<float>({2, 3, 4, 3}, rng);
  auto kernel = random_kernel<float>(3, 2, rng);
  Tensor<float> zero({3, 3, 4, 3});
  auto g0 = ops::conv3d_backward(input, kernel, zero);
  EXPECT_EQ(testutil::linf(g0.input), 0.0f);
  EXPECT_EQ(testutil::linf(g0.weights), 0.0f);
  EXPECT_EQ(testutil::linf(g0.bias), 0.0f);

  auto up = random_tensor<float>({3, 3, 4, 3}, rng);
  auto up2 = up;
  for (std::size_t i = 0; i < up2.size(); ++i) up2[i] *= 2.0f;
  auto g1 = ops::conv3d_backward(input, kernel, up);
  auto g2 = ops::conv3d_backward(input, kernel, up2);
  for (std::size_t i = 0; i < g1.weights.size(); ++i)
    EXPECT_NEAR(2.0f * g1.weights[i], g2.weights[i], 1e-4f);
  for (std::size_t i = 0; i < g1.input.size(); ++i)
    EXPECT_NEAR(2.0f * g1.input[i], g2.input[i], 1e-4f);
}

TEST(Conv3dBackward, GradBiasIsUpstreamChannelSum) {
  std::mt19937_64 rng(7);
  auto input = random_tensor<float>({2, 3, 3, 3}, rng);
  auto kernel = random_kernel<float>(2, 2, rng);
  auto up = random_tensor<float>({2, 3, 3, 3}, rng);
  auto g = ops::conv3d_backward(input, kernel, up);
  for (std::size_t c = 0; c < 2; ++c) {
    float sum = 0;
    for (std::size_t i = 0; i < 27; ++i) sum += up[c * 27 + i];
    EXPECT_NEAR(g.bias[c], sum, 1e-5f);
  }
}

TEST(Conv3dBackward, FiniteDifferenceOracle64Bit) {
  std::mt19937_64 rng(8);
  auto input = random_tensor<double>({2, 3, 4, 3}, rng);
  auto kernel = random_kernel<double>(3, 2, rng);
  auto weights_probe = random_tensor<double>({3, 3, 4, 3}, rng);

  auto loss = [&]() {
    auto out = ops::conv3d_forward(input, kernel);
    double acc = 0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * weights_probe[i];
    return acc;
  };
  auto analytic = ops::conv3d_backward(input, kernel, weights_probe);
  expect_grad_close(analytic.input, fd_gradient(loss, input), 1e-6, "conv grad_input");
  expect_grad_close(analytic.weights, fd_gradient(loss, kernel.weights), 1e-6,
                    "conv grad_weights");
  expect_grad_close(analytic.bias, fd_gradient(loss, kernel.bias), 1e-6, "conv grad_bias");
}

TEST(MaxPool3d, ElevenToFiveToTwo) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({1, 11, 11, 11}, rng);
  auto p1 = ops::maxpool3d(x);
  EXPECT_EQ(p1.output.shape(), (Shape{1, 5, 5, 5}));
  auto p2 = ops::maxpool3d(p1.output);
  EXPECT_EQ(p2.output.shape(), (Shape{1, 2, 2, 2}));
  // post-stack flattened feature length for the canonical net: 64 * 2^3
  EXPECT_EQ(64 * p2.output.size() / 1, std::size_t{512});
}

TEST(MaxPool3d, WindowMaxAndArgmax) {
  Tensor<float> x({1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) x[i] = static_cast<float>(i);
  auto p = ops::maxpool3d(x);
  ASSERT_EQ(p.output.size(), std::size_t{1});
  EXPECT_FLOAT_EQ(p.output[0], 7.0f);
  EXPECT_EQ(p.argmax[0], std::size_t{7});
}

TEST(MaxPool3d, ConstantInputTieBreaksLowestIndexAndRoutesGradient) {
  Tensor<float> x = Tensor<float>::filled({2, 4, 4, 4}, 3.5f);
  auto p = ops::maxpool3d(x);
  for (std::size_t i = 0; i < p.output.size(); ++i) EXPECT_FLOAT_EQ(p.output[i], 3.5f);
  // lowest linear index of each 2x2x2 window wins
  EXPECT_EQ(p.argmax[0], std::size_t{0});
  EXPECT_EQ(p.argmax[1], std::size_t{2});

  auto up = Tensor<float>::filled(p.output.shape(), 1.0f);
  auto grad = ops::maxpool3d_backward(p.argmax, up, x.shape());
  float total = 0;
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    total += grad[i];
    if (grad[i] != 0.0f) ++nonzero;
  }
  EXPECT_FLOAT_EQ(total, static_cast<float>(p.output.size()));
  EXPECT_EQ(nonzero, p.output.size());  // one voxel per window
}

TEST(MaxPool3d, GradientSumConserved) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<float>({3, 5, 6, 7}, rng);
  auto p = ops::maxpool3d(x);
  auto up = random_tensor<float>(p.output.shape(), rng);
  auto grad = ops::maxpool3d_backward(p.argmax, up, x.shape());
  double up_sum = 0, grad_sum = 0;
  for (std::size_t i = 0; i < up.size(); ++i) up_sum += up[i];
  for (std::size_t i = 0; i < grad.size(); ++i) grad_sum += grad[i];
  EXPECT_NEAR(up_sum, grad_sum, 1e-4);
}

TEST(MaxPool3d, RejectsTooSmallSpatialExtent) {
  Tensor<float> x({1, 1, 4, 4});
  EXPECT_THROW(ops::maxpool3d(x), ShapeError);
}

TEST(Prelu, AllPositiveIsIdentity) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<float>({2, 3, 2, 2}, rng, 0.1f, 2.0f);
  auto slopes = random_tensor<float>({3, 2, 2}, rng);
  auto out = ops::prelu(x, slopes);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(out[i], x[i]);
}

TEST(Prelu, ZeroSlopeIsRelu) {
  std::mt19937_64 rng(12);
  auto x = random_tensor<float>({8}, rng);
  Tensor<float> slopes({8});
  auto out = ops::prelu(x, slopes);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_FLOAT_EQ(out[i], x[i] > 0 ? x[i] : 0.0f);
}

TEST(Prelu, ShapeMismatchRejected) {
  Tensor<float> x({7});
  Tensor<float> slopes({3});
  EXPECT_THROW(ops::prelu(x, slopes), ShapeError);
}

TEST(Prelu, FiniteDifferenceOracle) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<double>({4, 6}, rng);  // batch of 4 over 6 shared slopes
  auto slopes = random_tensor<double>({6}, rng, 0.05, 0.5);
  auto probe = random_tensor<double>({4, 6}, rng);
  auto loss = [&]() {
    auto out = ops::prelu(x, slopes);
    double acc = 0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * probe[i];
    return acc;
  };
  auto g = ops::prelu_backward(x, slopes, probe);
  expect_grad_close(g.input, fd_gradient(loss, x), 1e-6, "prelu grad_input");
  expect_grad_close(g.slopes, fd_gradient(loss, slopes), 1e-6, "prelu grad_slopes");
}

TEST(BatchNorm, TrainModeNormalizesToBetaGamma) {
  std::mt19937_64 rng(14);
  auto x = random_tensor<float>({16, 3, 4, 4, 4}, rng, -3.0f, 5.0f);
  Tensor<float> gamma({3}), beta({3}), rm({3}), rv({3});
  gamma[0] = 1.5f; gamma[1] = -0.7f; gamma[2] = 2.0f;
  beta[0] = 0.3f; beta[1] = -1.0f; beta[2] = 0.0f;
  rv.fill(1.0f);
  auto out = ops::batchnorm_forward<float>(x, gamma, beta, rm, rv, RunMode::train,
                                           0.99f, 1e-3f);
  const std::size_t spatial = 64;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sumsq = 0;
    for (std::size_t s = 0; s < 16; ++s)
      for (std::size_t j = 0; j < spatial; ++j) {
        const double v = out[(s * 3 + c) * spatial + j];
        sum += v;
        sumsq += v * v;
      }
    const double m = 16.0 * spatial;
    const double mean = sum / m;
    const double stddev = std::sqrt(std::max(0.0, sumsq / m - mean * mean));
    EXPECT_NEAR(mean, beta[c], 1e-3);
    EXPECT_NEAR(stddev, std::abs(gamma[c]), 1e-2);
  }
}

TEST(BatchNorm, InferWithUnitStatsIsIdentity) {
  std::mt19937_64 rng(15);
  auto x = random_tensor<float>({2, 4, 3, 3, 3}, rng);
  Tensor<float> gamma = Tensor<float>::filled({4}, 1.0f);
  Tensor<float> beta({4}), rm({4});
  Tensor<float> rv = Tensor<float>::filled({4}, 1.0f);
  auto out = ops::batchnorm_forward<float>(x, gamma, beta, rm, rv, RunMode::infer,
                                           0.99f, 1e-3f);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i], 1.5e-3f);
}

TEST(BatchNorm, RunningStatsUpdateByMomentum) {
  std::mt19937_64 rng(16);
  auto x = random_tensor<float>({8, 2, 5}, rng, 2.0f, 4.0f);
  Tensor<float> gamma = Tensor<float>::filled({2}, 1.0f);
  Tensor<float> beta({2}), rm({2});
  Tensor<float> rv = Tensor<float>::filled({2}, 1.0f);
  ops::batchnorm_forward<float>(x, gamma, beta, rm, rv, RunMode::train, 0.9f, 1e-3f);
  // batch mean of channel 0
  double sum = 0;
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t j = 0; j < 5; ++j) sum += x[(s * 2 + 0) * 5 + j];
  const double mean = sum / 40.0;
  EXPECT_NEAR(rm[0], 0.9 * 0.0 + 0.1 * mean, 1e-4);
}

TEST(BatchNorm, ZeroBatchUnrepresentable) {
  // extents must be >= 1, so a zero-size batch is rejected at construction
  EXPECT_THROW(Tensor<float>({0, 3, 2}), ShapeError);
}

TEST(BatchNorm, FiniteDifferenceOracleOnFourSampleBatch) {
  std::mt19937_64 rng(17);
  auto x = random_tensor<double>({4, 2, 3, 3, 3}, rng);
  auto gamma = random_tensor<double>({2}, rng, 0.5, 1.5);
  auto beta = random_tensor<double>({2}, rng);
  auto probe = random_tensor<double>({4, 2, 3, 3, 3}, rng);
  auto loss = [&]() {
    Tensor<double> rm({2}), rv({2});
    rv.fill(1.0);
    auto out = ops::batchnorm_forward<double>(x, gamma, beta, rm, rv, RunMode::train,
                                              0.99, 1e-3);
    double acc = 0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * probe[i];
    return acc;
  };
  Tensor<double> rm({2}), rv({2});
  rv.fill(1.0);
  ops::BatchNormCache<double> cache;
  ops::batchnorm_forward<double>(x, gamma, beta, rm, rv, RunMode::train, 0.99, 1e-3,
                                 &cache);
  auto g = ops::batchnorm_backward(cache, gamma, probe);
  expect_grad_close(g.input, fd_gradient(loss, x), 1e-6, "bn grad_input");
  expect_grad_close(g.gamma, fd_gradient(loss, gamma), 1e-6, "bn grad_gamma");
  expect_grad_close(g.beta, fd_gradient(loss, beta), 1e-6, "bn grad_beta");
}

TEST(Dense, IdentityWeights) {
  std::mt19937_64 rng(18);
  auto x = random_tensor<float>({5}, rng);
  Tensor<float> w({5, 5}), b({5});
  for (std::size_t i = 0; i < 5; ++i) w(i, i) = 1.0f;
  auto out = ops::dense_forward(x, w, b);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_FLOAT_EQ(out[i], x[i]);
}

TEST(Dense, Fc3ShapeIs128To64) {
  std::mt19937_64 rng(19);
  auto x = random_tensor<float>({128}, rng);
  auto w = random_tensor<float>({64, 128}, rng);
  auto b = random_tensor<float>({64}, rng);
  auto out = ops::dense_forward(x, w, b);
  EXPECT_EQ(out.shape(), (Shape{64}));
}

TEST(Dense, DimensionMismatchRejected) {
  Tensor<float> x({7});
  Tensor<float> w({3, 5}), b({3});
  EXPECT_THROW(ops::dense_forward(x, w, b), ShapeError);
}

TEST(Dense, FiniteDifferenceOracle) {
  std::mt19937_64 rng(20);
  auto x = random_tensor<double>({3, 6}, rng);
  auto w = random_tensor<double>({4, 6}, rng);
  auto b = random_tensor<double>({4}, rng);
  auto probe = random_tensor<double>({3, 4}, rng);
  auto loss = [&]() {
    auto out = ops::dense_forward(x, w, b);
    double acc = 0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * probe[i];
    return acc;
  };
  auto g = ops::dense_backward(x, w, probe);
  expect_grad_close(g.input, fd_gradient(loss, x), 1e-6, "dense grad_input");
  expect_grad_close(g.weights, fd_gradient(loss, w), 1e-6, "dense grad_weights");
  expect_grad_close(g.bias, fd_gradient(loss, b), 1e-6, "dense grad_bias");
}

TEST(SoftmaxCrossEntropy, EqualLogitsGiveLogTwo) {
  Tensor<float> logits({3, 2});
  logits.fill(1.7f);
  Tensor<float> labels({3, 2});
  for (std::size_t i = 0; i < 3; ++i) labels(i, std::size_t{0}) = 1.0f;
  auto r = ops::softmax_crossentropy(logits, labels);
  EXPECT_NEAR(r.loss, std::log(2.0f), 1e-6f);
}

TEST(SoftmaxCrossEntropy, LargeMarginDrivesLossToZero) {
  Tensor<float> logits({1, 2});
  logits(std::size_t{0}, std::size_t{0}) = 10.0f;
  logits(std::size_t{0}, std::size_t{1}) = -10.0f;  // margin 20
  Tensor<float> labels({1, 2});
  labels(std::size_t{0}, std::size_t{0}) = 1.0f;
  auto r = ops::softmax_crossentropy(logits, labels);
  EXPECT_LT(r.loss, 1e-8f);
}

TEST(SoftmaxCrossEntropy, NonFiniteLogitsRejected) {
  Tensor<float> logits({1, 2});
  logits[0] = std::numeric_limits<float>::infinity();
  Tensor<float> labels({1, 2});
  labels(std::size_t{0}, std::size_t{1}) = 1.0f;
  EXPECT_THROW(ops::softmax_crossentropy(logits, labels), std::runtime_error);
}

TEST(SoftmaxCrossEntropy, FiniteDifferenceOracle) {
  std::mt19937_64 rng(21);
  auto logits = random_tensor<double>({6, 2}, rng, -2.0, 2.0);
  Tensor<double> labels({6, 2});
  std::uniform_int_distribution<int> coin(0, 1);
  for (std::size_t i = 0; i < 6; ++i) labels(i, static_cast<std::size_t>(coin(rng))) = 1.0;
  auto loss = [&]() { return ops::softmax_crossentropy(logits, labels).loss; };
  auto r = ops::softmax_crossentropy(logits, labels);
  expect_grad_close(r.grad, fd_gradient(loss, logits), 1e-6, "softmax-ce grad");
}

TEST(Dropout, ZeroProbabilityIsIdentity) {
  std::mt19937_64 seed(22);
  auto x = random_tensor<float>({100}, seed);
  Rng rng(7);
  auto train = ops::dropout(x, 0.0, RunMode::train, rng);
  auto infer = ops::dropout(x, 0.0, RunMode::infer, rng);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_FLOAT_EQ(train.output[i], x[i]);
    EXPECT_FLOAT_EQ(infer.output[i], x[i]);
  }
}

TEST(Dropout, InferModeIsIdentityForAnyP) {
  std::mt19937_64 seed(23);
  auto x = random_tensor<float>({64}, seed);
  Rng rng(7);
  auto r = ops::dropout(x, 0.9, RunMode::infer, rng);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(r.output[i], x[i]);
}

TEST(Dropout, SurvivorFractionNearHalf) {
  Tensor<float> x = Tensor<float>::filled({1000000}, 1.0f);
  Rng rng(99);
  auto r = ops::dropout(x, 0.5, RunMode::train, rng);
  std::size_t survivors = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (r.output[i] != 0.0f) ++survivors;
  const double frac = static_cast<double>(survivors) / 1e6;
  EXPECT_NEAR(frac, 0.5, 0.01);
  // inverted scaling: survivors are doubled
  for (std::size_t i = 0; i < x.size(); ++i)
    if (r.output[i] != 0.0f) EXPECT_FLOAT_EQ(r.output[i], 2.0f);
}

TEST(Dropout, DeterministicGivenSameStream) {
  std::mt19937_64 seed(24);
  auto x = random_tensor<float>({512}, seed);
  Rng r1(42), r2(42);
  auto a = ops::dropout(x, 0.5, RunMode::train, r1);
  auto b = ops::dropout(x, 0.5, RunMode::train, r2);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(a.output[i], b.output[i]);
}

TEST(Dropout, OutOfRangeProbabilityRejected) {
  Tensor<float> x({4});
  Rng rng(1);
  EXPECT_THROW(ops::dropout(x, 1.0, RunMode::train, rng), std::invalid_argument);
  EXPECT_THROW(ops::dropout(x, -0.1, RunMode::train, rng), std::invalid_argument);
}

TEST(Dropout, BackwardRoutesThroughMask) {
  std::mt19937_64 seed(25);
  auto x = random_tensor<float>({128}, seed);
  Rng rng(5);
  auto r = ops::dropout(x, 0.5, RunMode::train, rng);
  auto up = random_tensor<float>({128}, seed);
  auto grad = ops::dropout_backward(r.mask, up);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_FLOAT_EQ(grad[i], up[i] * r.mask[i]);
}

TEST(Tensor, InvariantsEnforced) {
  EXPECT_THROW(Tensor<float>({3, 0, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), std::size_t{6});
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.extent(0), std::size_t{3});
}
