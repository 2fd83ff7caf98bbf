#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dtsst/errors.hpp"
#include "dtsst/ops.hpp"
#include "dtsst/tensor.hpp"
#include "oracles.hpp"

using namespace dtsst;
using testing_oracles::max_rel_error;
using testing_oracles::numeric_grad;
using testing_oracles::random_tensor;

namespace {

// Builds out = fn(inputs), backpropagates a fixed random projection of it and
// compares every input gradient with central differences.
double op_grad_error(const std::function<Tensor()>& fn, const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) t.zero_grad();
  Tensor out = fn();
  const Tensor w = testing_oracles::weighted_sum_tensor(out);
  backward(sum(mul(out, w)));
  double worst = 0.0;
  for (const auto& t : inputs) {
    const auto numeric = numeric_grad([&] { return testing_oracles::weighted_sum(fn()); }, t);
    worst = std::max(worst, max_rel_error(t.grad(), numeric));
  }
  return worst;
}

std::vector<double> naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, Stride2 s,
                               std::size_t groups) {
  const std::size_t n = x.size(0), cin = x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t cout = k.size(0), cpg = k.size(1), kh = k.size(2), kw = k.size(3);
  const std::size_t oh = (h - kh) / s.h + 1, ow = (w - kw) / s.w + 1;
  const std::size_t opg = cout / groups;
  std::vector<double> y(n * cout * oh * ow, 0.0);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b.defined() ? b.data()[co] : 0.0;
          const std::size_t g = co / opg;
          for (std::size_t c = 0; c < cpg; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q)
                acc += x.at({in, g * cpg + c, i * s.h + p, j * s.w + q}) * k.at({co, c, p, q});
          y[((in * cout + co) * oh + i) * ow + j] = acc;
        }
  (void)cin;
  return y;
}

}  // namespace

TEST(Conv2d, HandCrossCorrelation) {
  auto x = Tensor::from({1, 1, 1, 5}, {1, 2, 3, 4, 5});
  auto k = Tensor::from({1, 1, 1, 3}, {1, 0, -1});
  auto y = conv2d(x, k);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 3}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{-2, -2, -2}));
}

TEST(Conv2d, AllOnesPointwiseIsChannelSum) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 4, 5}, rng, -1, 1, false);
  auto y = conv2d(x, Tensor::full({1, 3, 1, 1}, 1.0));
  ASSERT_EQ(y.shape(), (Shape{2, 1, 4, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double s = x.at({n, 0, i, j}) + x.at({n, 1, i, j}) + x.at({n, 2, i, j});
        EXPECT_NEAR(y.at({n, 0, i, j}), s, 1e-12);
      }
}

TEST(Conv2d, BranchOneGeometry) {
  auto x = Tensor::zeros({1, 1, 22, 1000});
  auto k = Tensor::zeros({40, 1, 1, 30});
  EXPECT_EQ(conv2d(x, k).shape(), (Shape{1, 40, 22, 971}));
}

TEST(Conv2d, MatchesNaiveLoopsIncludingGroups) {
  std::mt19937_64 rng(2);
  for (std::size_t groups : {1u, 2u, 4u}) {
    auto x = random_tensor({2, 4, 5, 7}, rng, -1, 1, false);
    auto k = random_tensor({4, 4 / groups, 2, 3}, rng, -1, 1, false);
    auto b = random_tensor({4}, rng, -1, 1, false);
    const Stride2 s{1, 2};
    const auto y = conv2d(x, k, b, s, groups);
    const auto ref = naive_conv(x, k, b, s, groups);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, RejectsBadShapes) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 1, 2}), Tensor::zeros({1, 1, 1, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 1, 4}), Tensor::zeros({1, 1, 1, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 1, 4}), Tensor::zeros({3, 1, 1, 3}), {}, {}, 2),
               ShapeError);
}

TEST(AvgPool, HandMean) {
  auto y = avg_pool2d(Tensor::from({1, 1, 1, 4}, {1, 2, 3, 4}), {1, 2}, {1, 2});
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1.5, 3.5}));
}

TEST(AvgPool, ConstantInputStaysConstant) {
  auto y = avg_pool2d(Tensor::full({2, 3, 2, 17}, 4.25), {2, 5}, {1, 3});
  for (double v : y.data()) EXPECT_NEAR(v, 4.25, 1e-14);
}

TEST(AvgPool, BranchOnePoolGeometry) {
  EXPECT_EQ(conv_out_extent(971, 120, 12), 71u);
  auto y = avg_pool2d(Tensor::zeros({1, 1, 1, 971}), {1, 120}, {1, 12});
  EXPECT_EQ(y.size(3), 71u);
}

TEST(ShapeAlgebra, RandomizedConvAndPoolSweep) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> ext(1, 40);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = ext(rng), w = ext(rng);
    const std::size_t kh = std::uniform_int_distribution<std::size_t>(1, h)(rng);
    const std::size_t kw = std::uniform_int_distribution<std::size_t>(1, w)(rng);
    const std::size_t sh = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const std::size_t sw = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const Shape want{1, 1, (h - kh) / sh + 1, (w - kw) / sw + 1};
    EXPECT_EQ(conv2d(Tensor::zeros({1, 1, h, w}), Tensor::zeros({1, 1, kh, kw}), {}, {sh, sw}).shape(),
              want);
    EXPECT_EQ(avg_pool2d(Tensor::zeros({1, 1, h, w}), {kh, kw}, {sh, sw}).shape(), want);
  }
  EXPECT_THROW(conv_out_extent(3, 4, 1), ShapeError);
  EXPECT_THROW(conv_out_extent(3, 2, 0), ShapeError);
}

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
  auto x = Tensor::from({3, 1, 1, 1}, {1, 2, 3});
  auto g = Tensor::full({1}, 1.0), b = Tensor::zeros({1});
  auto rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  auto y = batch_norm(x, g, b, rm, rv, true);
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], -1.0 / sd, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[2], 1.0 / sd, 1e-12);
  // Running stats: momentum 0.1 towards mean 2 and unbiased variance 1.
  EXPECT_NEAR(rm.item(), 0.2, 1e-12);
  EXPECT_NEAR(rv.item(), 0.9 + 0.1 * 1.0, 1e-12);
}

TEST(BatchNorm, EvalIdentityAndHandValue) {
  auto g = Tensor::full({1}, 1.0), b = Tensor::zeros({1});
  auto rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  auto x = Tensor::from({2, 1, 1, 2}, {0.5, -1, 3, 7});
  auto y = batch_norm(x, g, b, rm, rv, false);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i] / std::sqrt(1 + 1e-5), 1e-12);

  auto g3 = Tensor::full({1}, 3.0), b1 = Tensor::full({1}, 1.0);
  auto rm2 = Tensor::full({1}, 2.0), rv4 = Tensor::full({1}, 4.0);
  auto z = batch_norm(Tensor::from({1, 1, 1, 1}, {4.0}), g3, b1, rm2, rv4, false);
  EXPECT_NEAR(z.item(), 3.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-12);
  EXPECT_NEAR(z.item(), 4.0, 1e-5);
  // Eval mode leaves the running estimates alone.
  EXPECT_EQ(rm2.item(), 2.0);
}

TEST(BatchNorm, TrainStatisticsProperty) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({5, 3, 2, 4}, rng, -3, 5, false);
  auto g = Tensor::full({3}, 1.0), b = Tensor::zeros({3});
  auto rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
  auto y = batch_norm(x, g, b, rm, rv, true, 0.1, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    std::size_t cnt = 0;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j, ++cnt) m += y.at({n, c, i, j});
    m /= cnt;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) v += std::pow(y.at({n, c, i, j}) - m, 2);
    v /= cnt;
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Elu, HandValues) {
  auto y = elu(Tensor::from({3}, {0, 2, -1}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_EQ(y.data()[1], 2.0);
  EXPECT_NEAR(y.data()[2], std::exp(-1.0) - 1.0, 1e-15);
  EXPECT_NEAR(y.data()[2], -0.6321, 1e-4);
}

TEST(Linear, IdentityAndHandMatmul) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng, -1, 1, false);
  auto eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0;
  EXPECT_EQ(linear(x, eye, Tensor::zeros({4})).to_vector(), x.to_vector());
  auto y = linear(Tensor::from({2}, {1, 2}), Tensor::from({2, 2}, {1, 0, 0, 2}),
                  Tensor::from({2}, {0, 1}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1, 5}));
}

TEST(Softmax, Examples) {
  auto a = softmax(Tensor::from({2}, {0, 0}));
  EXPECT_NEAR(a.data()[0], 0.5, 1e-15);
  auto b = softmax(Tensor::from({2}, {1000, 1000}));
  EXPECT_NEAR(b.data()[0], 0.5, 1e-15);
  EXPECT_NEAR(b.data()[1], 0.5, 1e-15);
  auto c = softmax(Tensor::from({2}, {0, std::log(3.0)}));
  EXPECT_NEAR(c.data()[0], 0.25, 1e-12);
  EXPECT_NEAR(c.data()[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 7}, rng, -20, 20, false);
    auto p = softmax(x);
    std::vector<double> shifted = x.to_vector();
    for (auto& v : shifted) v += 123.5;
    auto q = softmax(Tensor::from({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += p.at({r, k});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-12);
    auto lp = log_softmax(x);
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(std::exp(lp.data()[i]), p.data()[i], 1e-12);
  }
}

TEST(LayerNorm, Examples) {
  auto g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
  auto y = layer_norm(Tensor::from({2}, {1, 3}), g, b, 0.0);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-12);
  auto z = layer_norm(Tensor::full({3}, 7.0), Tensor::full({3}, 1.0), Tensor::zeros({3}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  auto c = layer_norm(Tensor::from({3}, {1, 5, 2}), Tensor::zeros({3}), Tensor::full({3}, 2.5));
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
}

TEST(Gap, Examples) {
  EXPECT_EQ(gap(Tensor::from({1, 3}, {1, 2, 3})).to_vector(), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(gap(Tensor::from({2, 2}, {1, 2, 3, 4})).to_vector(), (std::vector<double>{2, 3}));
  EXPECT_EQ(gap(Tensor::from({1, 2, 2}, {1, 2, 3, 4})).shape(), (Shape{1, 2}));
}

TEST(Autodiff, SumAndSquareExamples) {
  auto x = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  auto y = Tensor::from({2}, {1, -2}, true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad()[0], 2.0);
  EXPECT_EQ(y.grad()[1], -4.0);
}

TEST(Autodiff, SecondBackwardOnFreedGraphFails) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
  EXPECT_EQ(Graph::current().size(), 0u);
}

TEST(Autodiff, NonScalarAndNoGradRejected) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), GraphError);
  Graph::current().clear();
  {
    NoGradGuard guard;
    auto y = sum(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(Graph::current().size(), 0u);
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Autodiff, NonFiniteResultRaises) {
  auto x = Tensor::from({1}, {1e308}, true);
  EXPECT_THROW(scale(x, 10.0), NumericalError);
  Graph::current().clear();
}

TEST(Autodiff, SharedInputAccumulates) {
  // f = sum(x*x + 3x) -> 2x + 3
  auto x = Tensor::from({3}, {0.5, -1, 2}, true);
  backward(sum(add(mul(x, x), scale(x, 3.0))));
  EXPECT_NEAR(x.grad()[0], 4.0, 1e-15);
  EXPECT_NEAR(x.grad()[1], 1.0, 1e-15);
  EXPECT_NEAR(x.grad()[2], 7.0, 1e-15);
}

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
  static constexpr double kTol = 1e-4;
};

TEST_F(OpGradient, Conv2dDenseStridedBias) {
  auto x = random_tensor({2, 2, 3, 6}, rng), k = random_tensor({3, 2, 2, 3}, rng),
       b = random_tensor({3}, rng);
  EXPECT_LT(op_grad_error([&] { return conv2d(x, k, b, {1, 2}); }, {x, k, b}), kTol);
}

TEST_F(OpGradient, Conv2dDepthwise) {
  auto x = random_tensor({2, 3, 4, 5}, rng), k = random_tensor({3, 1, 4, 1}, rng);
  EXPECT_LT(op_grad_error([&] { return conv2d(x, k, {}, {}, 3); }, {x, k}), kTol);
}

TEST_F(OpGradient, AvgPool) {
  auto x = random_tensor({2, 2, 3, 9}, rng);
  EXPECT_LT(op_grad_error([&] { return avg_pool2d(x, {2, 3}, {1, 2}); }, {x}), kTol);
}

TEST_F(OpGradient, BatchNormTraining) {
  auto x = random_tensor({3, 2, 2, 3}, rng), g = random_tensor({2}, rng, 0.5, 1.5),
       b = random_tensor({2}, rng);
  auto rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  EXPECT_LT(op_grad_error([&] { return batch_norm(x, g, b, rm, rv, true); }, {x, g, b}), kTol);
}

TEST_F(OpGradient, BatchNormEval) {
  auto x = random_tensor({2, 2, 1, 3}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  auto rm = random_tensor({2}, rng, -1, 1, false), rv = random_tensor({2}, rng, 0.5, 2, false);
  EXPECT_LT(op_grad_error([&] { return batch_norm(x, g, b, rm, rv, false); }, {x, g, b}), kTol);
}

TEST_F(OpGradient, Elu) {
  auto x = random_tensor({3, 5}, rng, -2, 2);
  EXPECT_LT(op_grad_error([&] { return elu(x); }, {x}), kTol);
}

TEST_F(OpGradient, LinearBatched) {
  auto x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  EXPECT_LT(op_grad_error([&] { return linear(x, w, b); }, {x, w, b}), kTol);
}

TEST_F(OpGradient, Matmul) {
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 2}, rng);
  EXPECT_LT(op_grad_error([&] { return matmul(a, b); }, {a, b}), kTol);
}

TEST_F(OpGradient, SoftmaxAndLogSoftmax) {
  auto x = random_tensor({3, 4}, rng, -3, 3);
  EXPECT_LT(op_grad_error([&] { return softmax(x); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return log_softmax(x); }, {x}), kTol);
}

TEST_F(OpGradient, LayerNorm) {
  auto x = random_tensor({3, 5}, rng, -2, 2), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
  EXPECT_LT(op_grad_error([&] { return layer_norm(x, g, b); }, {x, g, b}), kTol);
}

TEST_F(OpGradient, ReductionsAndElementwise) {
  auto x = random_tensor({2, 3, 4}, rng), y = random_tensor({3, 4}, rng), z = random_tensor({2, 3, 4}, rng);
  EXPECT_LT(op_grad_error([&] { return gap(x); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return mean_axis(x, 1); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return add(x, y); }, {x, y}), kTol);
  EXPECT_LT(op_grad_error([&] { return mul(x, z); }, {x, z}), kTol);
  EXPECT_LT(op_grad_error([&] { return scale(x, -1.7); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return sum(x); }, {x}), kTol);
}

TEST_F(OpGradient, ShapeOps) {
  auto x = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 5, 4}, rng);
  EXPECT_LT(op_grad_error([&] { return reshape(x, {6, 4}); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return permute(x, {2, 0, 1}); }, {x}), kTol);
  EXPECT_LT(op_grad_error([&] { return concat({x, y}, 1); }, {x, y}), kTol);
}

TEST(ShapeOps, PermuteAndConcatValues) {
  auto x = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(permute(x, {1, 0}).to_vector(), (std::vector<double>{0, 3, 1, 4, 2, 5}));
  auto c = concat({Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 2}, {3, 4, 5, 6})}, 0);
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  EXPECT_EQ(c.to_vector(), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
}

TEST(Dropout, IdentityWhenDisabledAndScaledOtherwise) {
  std::mt19937_64 rng(7);
  auto x = Tensor::full({1000}, 1.0);
  EXPECT_EQ(dropout(x, 0.5, false, rng).to_vector(), x.to_vector());
  EXPECT_EQ(dropout(x, 0.0, true, rng).to_vector(), x.to_vector());
  auto y = dropout(x, 0.5, true, rng);
  std::size_t kept = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
}

TEST(Determinism, IdenticalInputsGiveBitwiseIdenticalOutputs) {
  auto run = [] {
    std::mt19937_64 rng(11);
    auto x = random_tensor({2, 3, 4, 9}, rng, -1, 1, false);
    auto k = random_tensor({3, 1, 1, 4}, rng, -1, 1, false);
    return softmax(elu(conv2d(x, k, {}, {}, 3))).to_vector();
  };
  EXPECT_EQ(run(), run());
}
