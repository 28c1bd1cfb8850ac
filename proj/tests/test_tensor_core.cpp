#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "satcap/grad_check.hpp"
#include "satcap/ops.hpp"
#include "test_util.hpp"

using namespace satcap;
using satcap::testing::max_abs_diff;
using satcap::testing::probe;
using satcap::testing::random_tensor;
using TD = Tensor<double>;

namespace {

GradCheckOptions strict(double tol = 1e-4) {
  GradCheckOptions o;
  o.eps = 1e-4;
  o.tol = tol;
  return o;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = TD::from({2, 2}, {1, 0, 0, 1});
  auto m = TD::from({2, 2}, {3.5, -2, 7, 0.25});
  auto y = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), std::vector<double>({3.5, -2, 7, 0.25}));
}

TEST(Matmul, HandSum) {
  auto y = matmul(TD::from({2, 2}, {1, 2, 3, 4}), TD::from({2, 1}, {1, 1}));
  ASSERT_EQ(y.shape(), Shape({2, 1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 7.0);
}

TEST(Matmul, GradientMatchesCentralDifferences) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto rep = grad_check<double>([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}, strict(1e-6));
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(TD::zeros({2, 3}), TD::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
}

TEST(Bmm, TransposeVariantsAgreeWithExplicitPermute) {
  Rng rng(2);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 5, 4}, rng);
  auto direct = bmm(a, b, false, true);
  auto explicit_t = bmm(a, permute(b, {0, 2, 1}));
  EXPECT_LT(max_abs_diff(direct.data(), explicit_t.data()), 1e-14);
  auto at = permute(a, {0, 2, 1});
  auto via_ta = bmm(at, permute(b, {0, 2, 1}), true, false);
  EXPECT_LT(max_abs_diff(direct.data(), via_ta.data()), 1e-14);
}

TEST(Conv2d, PointwiseUnitKernelIsIdentity) {
  Rng rng(3);
  auto x = random_tensor({1, 1, 3, 5}, rng);
  auto y = conv2d(x, TD::from({1, 1, 1, 1}, {1.0}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(Conv2d, BoxSumOfOneHotIsAllOnes) {
  std::vector<double> v(9, 0.0);
  v[4] = 1.0;
  auto y = conv2d(TD::from({1, 1, 3, 3}, v), TD::full({1, 1, 3, 3}, 1.0), {}, 1, 1);
  for (double e : y.data()) EXPECT_DOUBLE_EQ(e, 1.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  Rng rng(4);
  auto x = random_tensor({2, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto y = conv2d(x, w, b, stride, 1);
    auto ref = satcap::testing::naive_conv(x, w, b, stride, 1, 1);
    ASSERT_EQ(y.numel(), ref.size());
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-13);
  }
}

TEST(Conv2d, ChannelMismatchAndEvenKernel) {
  EXPECT_THROW(conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({1, 3, 1, 1})), DimensionError);
  EXPECT_THROW(conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({1, 2, 2, 2})), UnsupportedConfigError);
}

TEST(DepthwiseConv, CenterOneKernelIsIdentity) {
  Rng rng(5);
  auto x = random_tensor({1, 3, 4, 4}, rng);
  std::vector<double> k(27, 0.0);
  for (int c = 0; c < 3; ++c) k[c * 9 + 4] = 1.0;
  auto y = depthwise_conv2d(x, TD::from({3, 1, 3, 3}, k));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(DepthwiseConv, ChannelsNeverMix) {
  Rng rng(6);
  auto x = random_tensor({1, 4, 5, 5}, rng);
  auto w = random_tensor({4, 1, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto y0 = depthwise_conv2d(x, w, b);
  auto x2 = x.clone();
  for (std::size_t i = 0; i < 25; ++i) x2.mutable_data()[i] += rng.uniform(0.5, 2.0);
  auto y1 = depthwise_conv2d(x2, w, b);
  for (std::size_t i = 25; i < y0.numel(); ++i) EXPECT_EQ(y0.data()[i], y1.data()[i]);
  EXPECT_NE(y0.data()[0], y1.data()[0]);
}

TEST(DepthwiseConv, MatchesGroupedConvOracle) {
  Rng rng(7);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  auto w = random_tensor({3, 1, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = depthwise_conv2d(x, w, b);
  auto ref = satcap::testing::naive_conv(x, w, b, 1, 1, 3);
  EXPECT_LT(max_abs_diff(y.data(), ref), 1e-14);
}

TEST(DepthwiseConv, RejectsNon3x3Kernel) {
  EXPECT_THROW(depthwise_conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({2, 1, 5, 5})), UnsupportedConfigError);
}

TEST(BatchNorm, TrainModeStandardizesPerChannel) {
  Rng rng(8);
  auto x = random_tensor({3, 2, 4, 4}, rng, -3.0, 5.0);
  BatchNormStats<double> stats{TD::zeros({2}), TD::full({2}, 1.0)};
  auto y = batch_norm(x, TD::full({2}, 1.0), TD::zeros({2}), stats, NormMode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t s = 0; s < 16; ++s) m += y.data()[(n * 2 + c) * 16 + s];
    m /= 48;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t s = 0; s < 16; ++s) v += std::pow(y.data()[(n * 2 + c) * 16 + s] - m, 2);
    v /= 48;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  auto x = TD::from({2, 1, 1, 2}, {1, 2, 3, 4});
  BatchNormStats<double> stats{TD::zeros({1}), TD::full({1}, 1.0)};
  batch_norm(x, TD::full({1}, 1.0), TD::zeros({1}), stats, NormMode::train);
  EXPECT_NEAR(stats.mean.data()[0], 0.1 * 2.5, 1e-15);
  // unbiased variance of {1,2,3,4} is 5/3
  EXPECT_NEAR(stats.var.data()[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentityUpToEps) {
  Rng rng(9);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  BatchNormStats<double> stats{TD::zeros({3}), TD::full({3}, 1.0)};
  auto y = batch_norm(x, TD::full({3}, 1.0), TD::zeros({3}), stats, NormMode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, EmptyBatchIsRejected) {
  BatchNormStats<double> stats{TD::zeros({2}), TD::full({2}, 1.0)};
  EXPECT_THROW(batch_norm(TD::zeros({0, 2, 2, 2}), TD::full({2}, 1.0), TD::zeros({2}), stats, NormMode::train),
               EmptyInputError);
}

TEST(BatchNorm, GradientBothModes) {
  Rng rng(10);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto g = random_tensor({3}, rng, 0.5, 1.5);
  auto b = random_tensor({3}, rng);
  for (auto mode : {NormMode::train, NormMode::eval}) {
    BatchNormStats<double> stats{TD::from({3}, {0.1, -0.2, 0.3}), TD::from({3}, {0.5, 1.5, 2.0})};
    auto rep = grad_check<double>(
        [&] {
          auto s = stats;
          auto saved_m = stats.mean.clone(), saved_v = stats.var.clone();
          auto y = probe(batch_norm(x, g, b, s, mode));
          std::copy(saved_m.data().begin(), saved_m.data().end(), stats.mean.mutable_data().begin());
          std::copy(saved_v.data().begin(), saved_v.data().end(), stats.var.mutable_data().begin());
          return y;
        },
        {{"x", x}, {"gamma", g}, {"beta", b}}, strict());
    EXPECT_TRUE(rep.passed()) << rep.worst_tensor << " " << rep.max_rel_error;
  }
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  auto beta = TD::from({4}, {0.5, -1, 2, 0});
  auto y = layer_norm(TD::full({1, 4}, 3.0), TD::from({4}, {2, 2, 2, 2}), beta);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y.data()[j], beta.data()[j]);
}

TEST(LayerNorm, RowsAreZeroMeanBeforeAffine) {
  Rng rng(11);
  auto y = layer_norm(random_tensor({5, 7}, rng, -4, 9), TD::full({7}, 1.0), TD::zeros({7}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0;
    for (std::size_t j = 0; j < 7; ++j) m += y.data()[r * 7 + j];
    EXPECT_NEAR(m / 7, 0.0, 1e-6);
  }
}

TEST(LayerNorm, Gradient) {
  Rng rng(12);
  auto x = random_tensor({3, 6}, rng);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  auto rep = grad_check<double>([&] { return probe(layer_norm(x, g, b)); }, {{"x", x}, {"gamma", g}, {"beta", b}}, strict());
  EXPECT_TRUE(rep.passed()) << rep.worst_tensor << " " << rep.max_rel_error;
}

TEST(Softmax, SymmetricPair) {
  auto y = softmax(TD::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto y = softmax(TD::from({2}, {1000, 0}));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y.data()[1]));
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  Rng rng(13);
  for (int axis : {0, 1, -1}) {
    auto x = random_tensor({3, 4, 2}, rng, -2, 2);
    auto rep = grad_check<double>([&] { return probe(softmax(x, axis)); }, {{"x", x}}, strict(1e-5));
    EXPECT_TRUE(rep.passed()) << axis << " " << rep.max_rel_error;
  }
}

TEST(Softmax, NaNInputRaisesNumericError) {
  EXPECT_THROW(softmax(TD::from({2}, {std::nan(""), 0.0})), NumericError);
}

TEST(Softmax, SlicesSumToOneForWideRange) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto y = softmax(random_tensor({4, 9}, rng, -1e4, 1e4), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        const double v = y.data()[r * 9 + j];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CausalSoftmax, MasksFutureAndNormalizesPrefix) {
  Rng rng(15);
  auto x = random_tensor({2, 4, 4}, rng);
  auto y = causal_softmax(x);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double v = y.data()[(m * 4 + i) * 4 + j];
        if (j > i) EXPECT_EQ(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  auto rep = grad_check<double>([&] { return probe(causal_softmax(x)); }, {{"x", x}}, strict(1e-5));
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(Activations, PointValues) {
  auto r = relu(TD::from({2}, {-1, 2}));
  EXPECT_EQ(r.data()[0], 0.0);
  EXPECT_EQ(r.data()[1], 2.0);
  EXPECT_EQ(gelu(TD::from({1}, {0.0})).data()[0], 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(TD::from({1}, {0.0})).data()[0], 0.5);
}

TEST(Activations, GeluAndSigmoidGradients) {
  Rng rng(16);
  auto x = random_tensor({10}, rng, -3, 3);
  auto rg = grad_check<double>([&] { return probe(gelu(x)); }, {{"x", x}}, strict(1e-5));
  EXPECT_TRUE(rg.passed()) << rg.max_rel_error;
  auto rs = grad_check<double>([&] { return probe(sigmoid(x)); }, {{"x", x}}, strict(1e-5));
  EXPECT_TRUE(rs.passed()) << rs.max_rel_error;
}

TEST(Backward, SumGivesOnes) {
  auto w = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, CompositeMatmulSoftmax) {
  Rng rng(17);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto rep = grad_check<double>([&] { return probe(softmax(matmul(a, b), 1)); }, {{"a", a}, {"b", b}}, strict());
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(Backward, SecondCallOnSameLossIsStale) {
  auto w = TD::from({2}, {1, 2}, true);
  auto loss = sum(mul(w, w));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, NonScalarLossRejected) {
  auto w = TD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(w, w)), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto w = TD::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(w);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(y), ContractError);
}

TEST(GradCheck, IdentitySumIsExact) {
  auto x = TD::from({4}, {0.1, 0.2, -0.3, 4});
  auto rep = grad_check<double>(std::function<TD(const TD&)>([](const TD& v) { return sum(v); }), x);
  EXPECT_LT(rep.max_rel_error, 1e-10);  // only FD roundoff remains
  EXPECT_EQ(rep.checked, 4u);
}

// Every differentiable op at three seeds.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, AllOpsPass) {
  Rng rng(GetParam());
  auto check = [&](const char* name, std::function<TD()> f, std::vector<NamedTensor<double>> in) {
    auto rep = grad_check<double>(f, in, strict());
    EXPECT_TRUE(rep.passed()) << name << ": " << rep.worst_tensor << "[" << rep.worst_index << "] err "
                              << rep.max_rel_error << " analytic " << rep.worst_analytic << " numeric "
                              << rep.worst_numeric;
  };
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  check("add", [&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}});
  check("sub", [&] { return probe(sub(a, b)); }, {{"a", a}, {"b", b}});
  check("mul", [&] { return probe(mul(a, b)); }, {{"a", a}, {"b", b}});
  check("div", [&] { return probe(div(a, pos)); }, {{"a", a}, {"pos", pos}});
  auto s = TD::from({}, {rng.uniform(1.0, 2.0)});
  check("div_scalar", [&] { return probe(div(a, s)); }, {{"a", a}, {"s", s}});
  check("permute", [&] { return probe(permute(a, {2, 0, 1})); }, {{"a", a}});
  check("reshape", [&] { return probe(reshape(a, {6, 4})); }, {{"a", a}});
  auto c = random_tensor({2, 2, 4}, rng);
  check("concat", [&] { return probe(concat<double>({a, c}, 1)); }, {{"a", a}, {"c", c}});
  check("slice", [&] { return probe(slice(a, 2, 1, 2)); }, {{"a", a}});
  auto m1 = random_tensor({2, 4, 3}, rng);
  check("bmm_tt", [&] { return probe(bmm(a, m1, true, true)); }, {{"a", a}, {"m1", m1}});
  auto w = random_tensor({4, 5}, rng);
  auto bias = random_tensor({5}, rng);
  check("linear", [&] { return probe(linear(a, w, bias)); }, {{"a", a}, {"w", w}, {"bias", bias}});
  auto img = random_tensor({2, 2, 5, 5}, rng);
  auto k3 = random_tensor({3, 2, 3, 3}, rng);
  auto kb = random_tensor({3}, rng);
  check("conv2d_s2", [&] { return probe(conv2d(img, k3, kb, 2, 1)); }, {{"img", img}, {"k", k3}, {"kb", kb}});
  auto k1 = random_tensor({3, 2, 1, 1}, rng);
  check("conv2d_1x1", [&] { return probe(conv2d(img, k1, kb)); }, {{"img", img}, {"k", k1}, {"kb", kb}});
  auto dk = random_tensor({2, 1, 3, 3}, rng);
  auto db = random_tensor({2}, rng);
  check("dwconv", [&] { return probe(depthwise_conv2d(img, dk, db)); }, {{"img", img}, {"k", dk}, {"b", db}});
  check("gelu", [&] { return probe(gelu(a)); }, {{"a", a}});
  check("causal", [&] { return probe(causal_softmax(a)); }, {{"a", a}});
  auto table = random_tensor({6, 4}, rng);
  std::vector<int> ids = {0, 5, 2, 2, 1, 3};
  check("embedding", [&] { return probe(embedding(table, ids, {2, 3})); }, {{"table", table}});
  std::vector<int> targets = {1, 3, 0, 4, 4, 2};
  auto logits = random_tensor({2, 3, 5}, rng, -2, 2);
  check("cross_entropy", [&] { return cross_entropy(logits, targets, 0); }, {{"logits", logits}});
  auto z1 = random_tensor({2, 3, 2, 2}, rng);
  auto z2 = random_tensor({2, 3, 2, 2}, rng);
  check("cosine_c", [&] { return probe(cosine_similarity(z1, z2, {1})); }, {{"z1", z1}, {"z2", z2}});
  check("cosine_hw", [&] { return probe(cosine_similarity(z1, z2, {2, 3})); }, {{"z1", z1}, {"z2", z2}});
  check("dropout", [&] {
    Rng local(5);
    return probe(dropout(a, 0.3, local));
  }, {{"a", a}});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Values(101u, 202u, 303u));

TEST(Determinism, IdenticalSeedGivesBitIdenticalForward) {
  auto run = [] {
    Rng rng(42);
    auto a = random_tensor({3, 8}, rng);
    auto w = random_tensor({8, 8}, rng);
    return layer_norm(gelu(linear(a, w)), TD::full({8}, 1.0), TD::zeros({8}));
  };
  auto y1 = run(), y2 = run();
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}
