#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dimlab/gradcheck.hpp"
#include "dimlab/oracles.hpp"
#include "dimlab/tensor.hpp"
#include "dimlab/verify.hpp"

using namespace dimlab;
using verify::detail::away_from_zero;
using verify::detail::random_tensor;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
std::vector<double> grads(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, NamedStreamsAreIndependentOfDrawOrder) {
  Rng root(7);
  Rng s1 = root.stream("data");
  root.next_u64();
  Rng s2 = root.stream("data");
  EXPECT_EQ(s1.next_u64(), s2.next_u64());
  EXPECT_NE(Rng(7).stream("data").next_u64(), Rng(7).stream("init").next_u64());
}

TEST(Rng, UniformIndexInRange) {
  Rng r(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[r.uniform_index(7)];
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Tensor, ShapeValueMismatchThrows) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrix) {
  auto i2 = Tensor::matrix({{1, 0}, {0, 1}});
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(vals(matmul(i2, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, OrthogonalVectors) {
  auto r = matmul(Tensor::matrix({{1, 0}}), Tensor::matrix({{0}, {1}}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng, 1.0, false);
  auto b = random_tensor({4, 2}, rng, 1.0, false);
  const auto ref = oracle::matmul(verify::detail::to_mat(a), verify::detail::to_mat(b));
  const auto got = matmul(a, b);
  for (std::size_t k = 0; k < ref.v.size(); ++k) EXPECT_NEAR(got.values()[k], ref.v[k], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Relu, Forward) {
  auto r = relu(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(vals(r), (std::vector<double>{0, 0, 2}));
}

TEST(Relu, AllNegativeGivesZeroGrad) {
  Tensor x({4}, {-1, -2, -0.5, -3}, true);
  auto y = relu(x);
  backward(sum(y));
  EXPECT_EQ(vals(y), std::vector<double>(4, 0.0));
  EXPECT_EQ(grads(x), std::vector<double>(4, 0.0));
}

TEST(Relu, GradientAtZeroIsZero) {
  Tensor x({3}, {0.0, 1.0, -1.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(grads(x), (std::vector<double>{0, 1, 0}));
}

TEST(Relu, FiniteDifferencesAwayFromKink) {
  Rng rng(2);
  auto x = away_from_zero({5, 4}, rng);
  auto w = random_tensor({5, 4}, rng, 1.0, false);
  const double err = finite_difference_check<double>([&] { return sum(mul(relu(x), w)); }, {x});
  EXPECT_LT(err, 1e-9);
}

TEST(BatchNorm, ConstantColumnGivesBeta) {
  auto x = Tensor::matrix({{2, 1}, {2, 3}, {2, 5}});
  Tensor gamma({2}, {3, 1}), beta({2}, {0.5, 0});
  RunningStats<double> st{Tensor::zeros({2}), Tensor::filled({2}, 1.0)};
  auto y = batch_norm(x, gamma, beta, Mode::train, st);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.at(i, 0), 0.5);
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  // Column mean 0 and biased variance 1.
  auto x = Tensor::matrix({{1, -1}, {-1, 1}});
  RunningStats<double> st{Tensor::zeros({2}), Tensor::filled({2}, 1.0)};
  auto y = batch_norm(x, Tensor::filled({2}, 1.0), Tensor::zeros({2}), Mode::train, st);
  const double shrink = 1.0 / std::sqrt(1.0 + kBatchNormEpsilon);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(y.values()[k], x.values()[k] * shrink, 1e-15);
}

TEST(BatchNorm, RunningStatsMomentum) {
  auto x = Tensor::matrix({{1.0}, {3.0}});
  RunningStats<double> st{Tensor::zeros({1}), Tensor::filled({1}, 1.0)};
  (void)batch_norm(x, Tensor::filled({1}, 1.0), Tensor::zeros({1}), Mode::train, st);
  EXPECT_DOUBLE_EQ(st.mean[0], 0.1 * 2.0);
  // Unbiased batch variance is 2.
  EXPECT_DOUBLE_EQ(st.var[0], 0.9 * 1.0 + 0.1 * 2.0);
}

TEST(BatchNorm, EvalUsesRunningStats) {
  auto x = Tensor::matrix({{3.0}});
  RunningStats<double> st{Tensor({1}, {1.0}), Tensor({1}, {4.0})};
  auto y = batch_norm(x, Tensor::filled({1}, 2.0), Tensor::filled({1}, 1.0), Mode::eval, st);
  EXPECT_NEAR(y.item(), 2.0 * 2.0 / std::sqrt(4.0 + kBatchNormEpsilon) + 1.0, 1e-15);
}

TEST(BatchNorm, SingleRowTrainThrows) {
  RunningStats<double> st{Tensor::zeros({2}), Tensor::filled({2}, 1.0)};
  EXPECT_THROW((void)batch_norm(Tensor::zeros({1, 2}), Tensor::filled({2}, 1.0),
                                Tensor::zeros({2}), Mode::train, st),
               BatchTooSmallError);
}

TEST(BatchNorm, FiniteDifferences8x4) {
  Rng rng(4);
  auto x = random_tensor({8, 4}, rng);
  auto gamma = random_tensor({4}, rng);
  auto beta = random_tensor({4}, rng);
  auto w = random_tensor({8, 4}, rng, 1.0, false);
  const double err = finite_difference_check<double>(
      [&] {
        RunningStats<double> st{Tensor::zeros({4}), Tensor::filled({4}, 1.0)};
        return sum(mul(batch_norm(x, gamma, beta, Mode::train, st), w));
      },
      {x, gamma, beta});
  EXPECT_LT(err, 1e-5);
}

TEST(L2Normalize, Examples) {
  auto y = l2_normalize(Tensor::matrix({{3, 4}, {0, 0}}));
  EXPECT_DOUBLE_EQ(y.at(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(y.at(0, 1), 0.8);
  EXPECT_EQ(y.at(1, 0), 0.0);
  EXPECT_EQ(y.at(1, 1), 0.0);
}

TEST(L2Normalize, RandomRowsHaveUnitNorm) {
  Rng rng(5);
  auto y = l2_normalize(random_tensor({20, 7}, rng, 3.0, false));
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(i, j) * y.at(i, j);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(grads(x), std::vector<double>(3, 1.0));
}

TEST(Backward, ConstantLeafPopulatesNothing) {
  auto c = Tensor::scalar(2.5);
  backward(c);
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, NonScalarThrows) {
  Tensor x({3}, {1, 2, 3}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, TwiceDoublesExactly) {
  Rng rng(6);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({3, 2}, rng);
  auto loss = sum(square(matmul(a, b)));
  backward(loss);
  const auto ga = grads(a), gb = grads(b);
  backward(loss);
  for (std::size_t k = 0; k < ga.size(); ++k) EXPECT_EQ(a.grad()[k], 2.0 * ga[k]);
  for (std::size_t k = 0; k < gb.size(); ++k) EXPECT_EQ(b.grad()[k], 2.0 * gb[k]);
}

TEST(Backward, MatmulGradientsClosedForm) {
  auto a = Tensor::matrix({{1, 2}}, true);
  auto b = Tensor::matrix({{3}, {4}}, true);
  backward(sum(matmul(a, b)));
  EXPECT_EQ(grads(a), (std::vector<double>{3, 4}));
  EXPECT_EQ(grads(b), (std::vector<double>{1, 2}));
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(8);
    auto a = random_tensor({5, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    backward(sum(relu(matmul(a, b))));
    return grads(a);
  };
  EXPECT_EQ(run(), run());
}

TEST(ShapeDiscipline, NoSilentBroadcast) {
  EXPECT_THROW((void)add(Tensor::zeros({2, 3}), Tensor::zeros({3})), DimensionError);
  EXPECT_THROW((void)mul(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW((void)add_bias(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  EXPECT_THROW((void)concat_rows(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), DimensionError);
}

TEST(AddBias, BroadcastsRowwise) {
  auto y = add_bias(Tensor::matrix({{1, 2}, {3, 4}}), Tensor({2}, {10, 20}));
  EXPECT_EQ(vals(y), (std::vector<double>{11, 22, 13, 24}));
}

TEST(GradCheck, LinearFunctionIsExact) {
  Rng rng(9);
  auto p = random_tensor({6}, rng);
  auto c = random_tensor({6}, rng, 1.0, false);
  EXPECT_LT(finite_difference_check<double>([&] { return sum(mul(p, c)); }, {p}), 1e-9);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(10);
  auto p = random_tensor({6}, rng);
  // Central differences are exact on a quadratic; what remains is roundoff.
  EXPECT_LT(finite_difference_check<double>([&] { return sum(square(p)); }, {p}), 1e-8);
}

TEST(GradCheck, TwoLayerMlpCrossEntropy) {
  Rng rng(11);
  auto x = random_tensor({6, 5}, rng, 1.0, false);
  auto w1 = random_tensor({5, 8}, rng, 0.5);
  auto b1 = random_tensor({8}, rng, 0.1);
  auto w2 = random_tensor({8, 3}, rng, 0.5);
  auto b2 = random_tensor({3}, rng, 0.1);
  const std::vector<std::int32_t> y{0, 1, 2, 0, 1, 2};
  const double err = finite_difference_check<double>(
      [&] { return cross_entropy(affine(relu(affine(x, w1, b1)), w2, b2), y); },
      {w1, b1, w2, b2});
  EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, NonFiniteLossThrows) {
  Tensor p({1}, {1.0}, true);
  EXPECT_THROW(
      (void)finite_difference_check<double>(
          [&] { return scale(sum(p), std::numeric_limits<double>::infinity()); }, {p}),
      NumericError);
}

TEST(GradCheck, NonPositiveEpsThrows) {
  Tensor p({1}, {1.0}, true);
  GradCheckOptions o;
  o.eps = 0.0;
  EXPECT_THROW((void)finite_difference_check<double>([&] { return sum(p); }, {p}, o),
               ContractError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // An op whose backward is off by a factor of two must be flagged.
  Tensor p({3}, {0.3, -0.7, 1.1}, true);
  auto broken = [&] {
    auto v = std::vector<double>(p.values().begin(), p.values().end());
    double s = 0.0;
    for (double x : v) s += x * x;
    auto pi = p.impl();
    return Tensor::make_result({}, {s}, {p}, [pi](auto g, auto pg) {
      for (std::size_t k = 0; k < pi->values.size(); ++k) (*pg[0])[k] += g[0] * 4.0 * pi->values[k];
    });
  };
  EXPECT_GT(finite_difference_check<double>(broken, {p}), 0.4);
}

TEST(Float32, ForwardAgreesWithDouble) {
  auto a = TensorF::matrix({{1.5f, -2.0f}, {0.25f, 4.0f}});
  auto b = TensorF::matrix({{2.0f}, {1.0f}});
  auto r = matmul(a, b);
  EXPECT_FLOAT_EQ(r.at(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(r.at(1, 0), 4.5f);
}
