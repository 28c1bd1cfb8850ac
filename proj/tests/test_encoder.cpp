#include <gtest/gtest.h>

#include <cmath>

#include "satcap/encoder.hpp"
#include "test_util.hpp"

using namespace satcap;
using satcap::testing::max_abs_diff;
using satcap::testing::probe;
using satcap::testing::random_tensor;

namespace {

void assign(Tensor<double> t, const std::vector<double>& v) {
  auto d = t.mutable_data();
  ASSERT_EQ(d.size(), v.size());
  std::copy(v.begin(), v.end(), d.begin());
}

void randomize(Tensor<double> t, Rng& rng, double scale = 0.5) {
  for (auto& x : t.mutable_data()) x = rng.uniform(-scale, scale);
}

EncoderConfig tiny_config(std::size_t layers = 1) {
  EncoderConfig c;
  c.use_backbone = false;
  c.backbone_channels = 6;
  c.feature_hw = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.encoder_layers = layers;
  return c;
}

double row_sum_error(const Tensor<double>& p) {
  const auto last = p.shape().back();
  double worst = 0.0;
  for (std::size_t r = 0; r < p.numel() / last; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < last; ++j) s += p.data()[r * last + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

}  // namespace

TEST(Backbone, DeskShapeAndDeterminism) {
  EncoderConfig cfg;
  ParamStore<double> store;
  Rng rng(1);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(2);
  auto img = random_tensor({1, 3, 32, 32}, data, 0.0, 1.0);
  auto img2 = img.clone();
  auto f = enc.extract_features(img, NormMode::eval);
  EXPECT_EQ(f.shape(), (Shape{1, 128, 8, 8}));
  auto g = enc.extract_features(img2, NormMode::eval);
  EXPECT_EQ(max_abs_diff(f.data(), g.data()), 0.0);
}

TEST(Backbone, RejectsWrongChannelCount) {
  EncoderConfig cfg;
  ParamStore<double> store;
  Rng rng(1);
  SceEncoder<double> enc(cfg, store, rng);
  EXPECT_THROW(enc.extract_features(Tensor<double>::zeros({1, 4, 32, 32}), NormMode::eval), DimensionError);
}

TEST(Sem, ShapeAndPositionalMismatch) {
  auto cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(3);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(4);
  auto x = random_tensor({2, 6, 2, 2}, data);
  EXPECT_EQ(enc.sem_forward(x, NormMode::eval).shape(), (Shape{2, 8, 2, 2}));
  EXPECT_THROW(enc.sem_forward(random_tensor({2, 6, 3, 3}, data), NormMode::eval), DimensionError);
}

TEST(Sem, ZeroPositionalEqualsConvStack) {
  auto cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(5);
  SceEncoder<double> enc(cfg, store, rng);
  const auto& sem = enc.sem();
  assign(sem.pos, std::vector<double>(sem.pos.numel(), 0.0));
  Rng data(6);
  auto x = random_tensor({2, 6, 2, 2}, data);
  auto got = enc.sem_forward(x, NormMode::train);
  auto want = sem.dw(sem.conv2(sem.conv1(x, NormMode::train), NormMode::train));
  EXPECT_EQ(max_abs_diff(got.data(), want.data()), 0.0);
}

// Layer-by-layer oracle: explicit loops for the 1x1 convs, BN in eval mode
// with perturbed running statistics, and the depthwise conv.
TEST(Sem, MatchesLoopOracle) {
  auto cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(7);
  SceEncoder<double> enc(cfg, store, rng);
  const auto& sem = enc.sem();
  Rng tweak(8);
  for (auto& b : store.buffers()) {
    for (auto& v : Tensor<double>(b.tensor).mutable_data()) v = b.name.ends_with("var") ? tweak.uniform(0.5, 2.0) : tweak.uniform(-0.3, 0.3);
  }
  for (auto& p : store.params()) {
    if (p.name.starts_with("sem.")) randomize(p.tensor, tweak);
  }
  Rng data(9);
  auto x = random_tensor({1, 6, 2, 2}, data);
  const std::size_t hw = 4, co = 6, c = 8;
  auto cbr = [&](const std::vector<double>& in, std::size_t cin, const ConvBnAct<double>& l) {
    std::vector<double> out(c * hw);
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < cin; ++i) acc += l.conv.weight.data()[o * cin + i] * in[i * hw + p];
        const double m = l.bn.stats.mean.data()[o], v = l.bn.stats.var.data()[o];
        const double y = (acc - m) / std::sqrt(v + 1e-5) * l.bn.gamma.data()[o] + l.bn.beta.data()[o];
        out[o * hw + p] = std::max(0.0, y);
      }
    return out;
  };
  std::vector<double> in(co * hw);
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = x.data()[i] + sem.pos.data()[i];
  auto h = cbr(cbr(in, co, sem.conv1), c, sem.conv2);
  auto hx = Tensor<double>::from({1, c, 2, 2}, h);
  auto want = satcap::testing::naive_conv(hx, sem.dw.weight, sem.dw.bias, 1, 1, c);
  auto got = enc.sem_forward(x, NormMode::eval);
  EXPECT_LT(max_abs_diff(got.data(), want), 1e-14);
}

TEST(Sam, SinglePositionIsValueProjection) {
  ParamStore<double> store;
  Rng rng(10);
  SpatialAttention<double> sam(store, "sam", 4, 2, rng);
  Rng data(11);
  auto x = random_tensor({1, 1, 4}, data);
  Tensor<double> probs;
  auto y = sam(x, &probs);
  auto want = sam.out(sam.v(x));
  EXPECT_LT(max_abs_diff(y.data(), want.data()), 1e-15);
  for (double p : probs.data()) EXPECT_EQ(p, 1.0);
}

TEST(Sam, IdenticalPositionsGiveIdenticalOutputs) {
  ParamStore<double> store;
  Rng rng(12);
  SpatialAttention<double> sam(store, "sam", 4, 2, rng);
  std::vector<double> row{0.3, -0.2, 0.7, 0.1};
  std::vector<double> v;
  for (int i = 0; i < 5; ++i) v.insert(v.end(), row.begin(), row.end());
  auto y = sam(Tensor<double>::from({1, 5, 4}, v));
  for (std::size_t p = 1; p < 5; ++p)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.data()[p * 4 + c], y.data()[c]);
}

// Two positions, one head, identity projections: the attention weights are
// the closed-form softmax of two logits x_i.x_j / sqrt(d).
TEST(Sam, TwoPositionHandEvaluation) {
  ParamStore<double> store;
  Rng rng(13);
  SpatialAttention<double> sam(store, "sam", 2, 1, rng);
  const std::vector<double> eye{1, 0, 0, 1};
  for (auto* l : {&sam.q, &sam.k, &sam.v, &sam.out}) assign(l->weight, eye);
  const double a0 = 0.8, a1 = -0.4, b0 = 0.3, b1 = 1.1;
  auto y = sam(Tensor<double>::from({1, 2, 2}, {a0, a1, b0, b1}));
  const double s = 1.0 / std::sqrt(2.0);
  const double aa = (a0 * a0 + a1 * a1) * s, ab = (a0 * b0 + a1 * b1) * s, bb = (b0 * b0 + b1 * b1) * s;
  const double p0 = 1.0 / (1.0 + std::exp(ab - aa));  // weight of position 0 for query 0
  const double q0 = 1.0 / (1.0 + std::exp(ab - bb));  // weight of position 1 for query 1
  const std::vector<double> want{p0 * a0 + (1 - p0) * b0, p0 * a1 + (1 - p0) * b1,
                                 (1 - q0) * a0 + q0 * b0, (1 - q0) * a1 + q0 * b1};
  EXPECT_LT(max_abs_diff(y.data(), want), 1e-15);
}

TEST(Sam, RowsSumToOne) {
  ParamStore<double> store;
  Rng rng(14);
  SpatialAttention<double> sam(store, "sam", 8, 4, rng);
  Rng data(15);
  Tensor<double> probs;
  sam(random_tensor({2, 9, 8}, data, -3, 3), &probs);
  EXPECT_EQ(probs.shape(), (Shape{2, 4, 9, 9}));
  EXPECT_LT(row_sum_error(probs), 1e-6);
}

TEST(Sam, HeadsMustDivideDim) {
  ParamStore<double> store;
  Rng rng(16);
  SpatialAttention<double> sam(store, "sam", 6, 4, rng);
  EXPECT_THROW(sam(Tensor<double>::zeros({1, 2, 6})), ConfigError);
}

TEST(Cam, SingleChannelClosedForm) {
  ParamStore<double> store;
  Rng rng(17);
  ChannelAttention<double> cam(store, "cam", 1, LocalEnhance::dwconv, rng);
  Rng data(18);
  auto x = random_tensor({1, 4, 1}, data);
  Tensor<double> attn;
  auto y = cam(x, 2, 2, NormMode::train, &attn);
  EXPECT_EQ(attn.data()[0], 1.0);
  auto v = slice(cam.qkv(x), -1, 2, 1);
  auto want = add(add(v, map_to_tokens(gelu(cam.bn(cam.dw(tokens_to_map(v, 2, 2)), NormMode::train)))), x);
  EXPECT_LT(max_abs_diff(y.data(), want.data()), 1e-15);
}

TEST(Cam, NoLocalEnhanceDropsTerm) {
  ParamStore<double> store;
  Rng rng(19);
  ChannelAttention<double> cam(store, "cam", 3, LocalEnhance::none, rng);
  Rng data(20);
  auto x = random_tensor({1, 4, 3}, data);
  auto proj = cam.qkv(x);
  auto q = slice(proj, -1, 0, 3), k = slice(proj, -1, 3, 3), v = slice(proj, -1, 6, 3);
  auto want = add(bmm(v, softmax(div(bmm(q, k, true, false), cam.alpha), -1)), x);
  auto got = cam(x, 2, 2, NormMode::eval);
  EXPECT_EQ(max_abs_diff(got.data(), want.data()), 0.0);
  EXPECT_EQ(store.params().size(), 3u);  // qkv weight, qkv bias, alpha
}

// C=2, HW=2 with random projections, evaluated with scalar arithmetic.
TEST(Cam, TwoByTwoHandEvaluation) {
  ParamStore<double> store;
  Rng rng(21);
  ChannelAttention<double> cam(store, "cam", 2, LocalEnhance::none, rng);
  Rng tweak(22);
  randomize(cam.qkv.weight, tweak, 1.0);
  randomize(cam.qkv.bias, tweak, 0.5);
  assign(cam.alpha, {0.7});
  const std::vector<double> xv{0.5, -1.0, 0.25, 0.75};
  const auto& w = cam.qkv.weight.data();
  const auto& b = cam.qkv.bias.data();
  double q[2][2], k[2][2], v[2][2];
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 2; ++j) {
      auto proj = [&](int col) { return xv[n * 2] * w[col] + xv[n * 2 + 1] * w[6 + col] + b[col]; };
      q[n][j] = proj(j);
      k[n][j] = proj(2 + j);
      v[n][j] = proj(4 + j);
    }
  double a[2][2];
  for (int c = 0; c < 2; ++c) {
    const double s0 = (q[0][c] * k[0][0] + q[1][c] * k[1][0]) / 0.7;
    const double s1 = (q[0][c] * k[0][1] + q[1][c] * k[1][1]) / 0.7;
    a[c][0] = 1.0 / (1.0 + std::exp(s1 - s0));
    a[c][1] = 1.0 - a[c][0];
  }
  std::vector<double> want(4);
  for (int n = 0; n < 2; ++n)
    for (int d = 0; d < 2; ++d) want[n * 2 + d] = v[n][0] * a[0][d] + v[n][1] * a[1][d] + xv[n * 2 + d];
  Tensor<double> attn;
  auto got = cam(Tensor<double>::from({1, 2, 2}, xv), 1, 2, NormMode::eval, &attn);
  EXPECT_LT(max_abs_diff(got.data(), want), 1e-14);
  EXPECT_NEAR(attn.data()[0], a[0][0], 1e-15);
}

TEST(Cam, AttentionIsChannelByChannelForAnyGrid) {
  ParamStore<double> store;
  Rng rng(23);
  ChannelAttention<double> cam(store, "cam", 8, LocalEnhance::dwconv, rng);
  Rng data(24);
  for (std::size_t side : {1u, 3u, 5u}) {
    Tensor<double> attn;
    cam(random_tensor({2, side * side, 8}, data, -2, 2), side, side, NormMode::train, &attn);
    EXPECT_EQ(attn.shape(), (Shape{2, 8, 8}));
    EXPECT_LT(row_sum_error(attn), 1e-6);
  }
}

TEST(Cam, TemperatureIsLearnableScalar) {
  ParamStore<double> store;
  Rng rng(25);
  ChannelAttention<double> cam(store, "cam", 16, LocalEnhance::dwconv, rng);
  EXPECT_EQ(cam.alpha.rank(), 0u);
  EXPECT_DOUBLE_EQ(cam.alpha.item(), 4.0);
  EXPECT_TRUE(cam.alpha.requires_grad());
}

TEST(ConvFfn, GateOpenReducesToProjection) {
  ParamStore<double> store;
  Rng rng(26);
  ConvFfn<double> ffn(store, "ffn", 2, 4, FfnVariant::gated, rng);
  // L1 = gelu(x) and L2 is pinned to the constant gelu(1); identity depthwise
  // kernels then leave Z = gelu(1) * L1 W2' + b2'.
  assign(ffn.fc1.weight, {1, 0, 0, 0, 0, 1, 0, 0});
  assign(ffn.fc1.bias, {0, 0, 1.0, 1.0});
  auto g1 = gelu(Tensor<double>::scalar(1.0)).item();
  assign(ffn.dw.weight, {0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0});
  assign(ffn.dw.bias, {0, 0});
  Rng tweak(27);
  randomize(ffn.fc2.weight, tweak, 1.0);
  randomize(ffn.fc2.bias, tweak, 1.0);
  Rng data(28);
  auto x = random_tensor({1, 4, 2}, data);
  auto got = ffn(x, 2, 2);
  auto l1 = gelu(x);
  auto want = linear(scale(l1, g1), ffn.fc2.weight, ffn.fc2.bias);
  EXPECT_LT(max_abs_diff(got.data(), want.data()), 1e-15);
}

TEST(ConvFfn, OddHiddenIsConfigError) {
  ParamStore<double> store;
  Rng rng(29);
  EXPECT_THROW(ConvFfn<double>(store, "ffn", 4, 7, FfnVariant::gated, rng), ConfigError);
  auto cfg = tiny_config();
  cfg.ffn_hidden = 9;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// Step-by-step composition with explicit loops for the projections.
TEST(ConvFfn, MatchesLoopOracle) {
  for (auto variant : {FfnVariant::gated, FfnVariant::standard}) {
    ParamStore<double> store;
    Rng rng(30);
    const std::size_t c = 3, hidden = 6, hw = 4;
    ConvFfn<double> ffn(store, "ffn", c, hidden, variant, rng);
    Rng tweak(31);
    for (auto& p : store.params()) randomize(p.tensor, tweak);
    Rng data(32);
    auto x = random_tensor({1, hw, c}, data);
    auto gelu_s = [](double v) { return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))); };
    std::vector<double> act(hw * hidden);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t j = 0; j < hidden; ++j) {
        double s = ffn.fc1.bias.data()[j];
        for (std::size_t i = 0; i < c; ++i) s += x.data()[p * c + i] * ffn.fc1.weight.data()[i * hidden + j];
        act[p * hidden + j] = gelu_s(s);
      }
    const std::size_t mixed = variant == FfnVariant::gated ? hidden / 2 : hidden;
    std::vector<double> cmap(mixed * hw);
    for (std::size_t ch = 0; ch < mixed; ++ch)
      for (std::size_t p = 0; p < hw; ++p) cmap[ch * hw + p] = act[p * hidden + ch];
    auto conv = satcap::testing::naive_conv(Tensor<double>::from({1, mixed, 2, 2}, cmap), ffn.dw.weight, ffn.dw.bias, 1, 1, mixed);
    std::vector<double> want(hw * c);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t o = 0; o < c; ++o) {
        double s = ffn.fc2.bias.data()[o];
        for (std::size_t ch = 0; ch < mixed; ++ch) {
          double h = conv[ch * hw + p];
          if (variant == FfnVariant::gated) h *= act[p * hidden + mixed + ch];
          s += h * ffn.fc2.weight.data()[ch * c + o];
        }
        want[p * c + o] = s;
      }
    auto got = ffn(x, 2, 2);
    EXPECT_EQ(got.shape(), x.shape());
    EXPECT_LT(max_abs_diff(got.data(), want), 1e-14);
  }
}

TEST(Encoder, ZeroLayersPassesSemThrough) {
  auto cfg = tiny_config(0);
  ParamStore<double> store;
  Rng rng(33);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(34);
  auto x = random_tensor({2, 6, 2, 2}, data);
  auto a = enc.encode(x, NormMode::eval);
  auto b = enc.sem_forward(x, NormMode::eval);
  EXPECT_EQ(max_abs_diff(a.data(), b.data()), 0.0);
}

TEST(Encoder, SamThenCamMatchesManualComposition) {
  auto cfg = tiny_config(1);
  ParamStore<double> store;
  Rng rng(35);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(36);
  auto x = random_tensor({2, 6, 2, 2}, data);
  const auto& layer = enc.layers()[0];
  auto t = map_to_tokens(enc.sem_forward(x, NormMode::train));
  t = add(t, layer.sam(layer.sam_norm(t)));
  t = add(t, layer.cam(layer.cam_norm(t), 2, 2, NormMode::train));
  t = add(t, layer.ffn(layer.ffn_norm(t), 2, 2));
  auto want = tokens_to_map(t, 2, 2);
  auto got = enc.encode(x, NormMode::train);
  EXPECT_EQ(max_abs_diff(got.data(), want.data()), 0.0);
}

TEST(Encoder, ParallelSumsBranches) {
  auto cfg = tiny_config(1);
  cfg.ordering = Ordering::parallel;
  ParamStore<double> store;
  Rng rng(37);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(38);
  auto x = random_tensor({1, 6, 2, 2}, data);
  const auto& layer = enc.layers()[0];
  auto t = map_to_tokens(enc.sem_forward(x, NormMode::eval));
  auto merged = add(add(t, layer.sam(layer.sam_norm(t))), layer.cam(layer.cam_norm(t), 2, 2, NormMode::eval));
  auto want = tokens_to_map(add(merged, layer.ffn(layer.ffn_norm(merged), 2, 2)), 2, 2);
  EXPECT_EQ(max_abs_diff(enc.encode(x, NormMode::eval).data(), want.data()), 0.0);
}

TEST(Encoder, SiameseIndependence) {
  auto cfg = tiny_config(2);
  ParamStore<double> store;
  Rng rng(39);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(40);
  auto i1 = random_tensor({1, 6, 2, 2}, data);
  auto i2 = random_tensor({1, 6, 2, 2}, data);
  auto i3 = random_tensor({1, 6, 2, 2}, data);
  auto with2 = enc.encode(concat<double>({i1, i2}, 0), NormMode::eval);
  auto with3 = enc.encode(concat<double>({i1, i3}, 0), NormMode::eval);
  for (std::size_t i = 0; i < with2.numel() / 2; ++i) EXPECT_EQ(with2.data()[i], with3.data()[i]);
}

TEST(Encoder, SharedWeightsAffectBothBranches) {
  auto cfg = tiny_config(1);
  ParamStore<double> store;
  Rng rng(41);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(42);
  auto a = random_tensor({1, 6, 2, 2}, data), b = random_tensor({1, 6, 2, 2}, data);
  auto before_a = enc.encode(a, NormMode::eval), before_b = enc.encode(b, NormMode::eval);
  auto w = enc.layers()[0].sam.v.weight;
  w.mutable_data()[0] += 0.5;
  EXPECT_GT(max_abs_diff(enc.encode(a, NormMode::eval).data(), before_a.data()), 0.0);
  EXPECT_GT(max_abs_diff(enc.encode(b, NormMode::eval).data(), before_b.data()), 0.0);
}

TEST(Encoder, SharedLayerNormIsOneParameterSet) {
  auto shared = tiny_config(2);
  auto split = shared;
  split.share_layernorm = false;
  ParamStore<double> s1, s2;
  Rng r1(43), r2(43);
  SceEncoder<double> e1(shared, s1, r1);
  SceEncoder<double> e2(split, s2, r2);
  EXPECT_TRUE(e1.layers()[0].sam_norm.same_as(e1.layers()[0].cam_norm));
  EXPECT_FALSE(e2.layers()[0].sam_norm.same_as(e2.layers()[0].cam_norm));
  EXPECT_LT(s1.parameter_count(), s2.parameter_count());
}

TEST(Encoder, TraceRowsSumToOne) {
  auto cfg = tiny_config(2);
  cfg.feature_hw = 3;
  ParamStore<double> store;
  Rng rng(44);
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(45);
  EncoderTrace<double> trace;
  enc.encode(random_tensor({2, 6, 3, 3}, data, -2, 2), NormMode::train, &trace);
  ASSERT_EQ(trace.sam_probs.size(), 2u);
  ASSERT_EQ(trace.cam_attn.size(), 2u);
  EXPECT_EQ(trace.sam_probs[0].shape(), (Shape{2, 2, 9, 9}));
  EXPECT_EQ(trace.cam_attn[0].shape(), (Shape{2, 8, 8}));
  for (const auto& p : trace.sam_probs) EXPECT_LT(row_sum_error(p), 1e-6);
  for (const auto& a : trace.cam_attn) EXPECT_LT(row_sum_error(a), 1e-6);
}

TEST(Encoder, OrderingVariantsBuildAndRun) {
  for (auto ord : {Ordering::sam_then_cam, Ordering::cam_then_sam, Ordering::parallel, Ordering::sam_only, Ordering::cam_only}) {
    auto cfg = tiny_config(1);
    cfg.ordering = ord;
    ParamStore<double> store;
    Rng rng(46);
    SceEncoder<double> enc(cfg, store, rng);
    EXPECT_EQ(enc.encode(Tensor<double>::zeros({1, 6, 2, 2}), NormMode::eval).shape(), (Shape{1, 8, 2, 2}));
  }
}

class EncoderGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(EncoderGradient, FullEncoderMatchesFiniteDifferences) {
  auto cfg = tiny_config(1);
  ParamStore<double> store;
  Rng rng(GetParam());
  SceEncoder<double> enc(cfg, store, rng);
  Rng data(GetParam() + 1);
  auto x = random_tensor({2, 6, 2, 2}, data);
  std::vector<NamedTensor<double>> inputs = store.params();
  inputs.push_back({"input", x});
  auto rep = grad_check<double>([&] { return probe(enc.encode(x, NormMode::train)); }, inputs, {});
  EXPECT_LE(rep.max_rel_error, 1e-3) << rep.worst_tensor << "[" << rep.worst_index << "]";
}

TEST_P(EncoderGradient, EachBlockMatchesFiniteDifferences) {
  const auto seed = GetParam();
  Rng data(seed + 7);
  auto tokens = random_tensor({2, 4, 8}, data);
  auto check = [&](const char* what, ParamStore<double>& store, const std::function<Tensor<double>()>& f) {
    std::vector<NamedTensor<double>> inputs = store.params();
    inputs.push_back({"input", tokens});
    auto rep = grad_check<double>(f, inputs, {});
    EXPECT_LE(rep.max_rel_error, 1e-4) << what << ": " << rep.worst_tensor << "[" << rep.worst_index << "]";
  };
  {
    ParamStore<double> s;
    Rng r(seed);
    SpatialAttention<double> sam(s, "sam", 8, 2, r);
    check("sam", s, [&] { return probe(sam(tokens)); });
  }
  for (auto local : {LocalEnhance::dwconv, LocalEnhance::conv1x1, LocalEnhance::conv3x3, LocalEnhance::none}) {
    ParamStore<double> s;
    Rng r(seed);
    ChannelAttention<double> cam(s, "cam", 8, local, r);
    check("cam", s, [&] { return probe(cam(tokens, 2, 2, NormMode::train)); });
  }
  for (auto variant : {FfnVariant::gated, FfnVariant::standard}) {
    ParamStore<double> s;
    Rng r(seed);
    ConvFfn<double> ffn(s, "ffn", 8, 16, variant, r);
    check("convffn", s, [&] { return probe(ffn(tokens, 2, 2)); });
  }
  {
    auto cfg = tiny_config(0);
    ParamStore<double> s;
    Rng r(seed);
    SceEncoder<double> enc(cfg, s, r);
    auto x = random_tensor({2, 6, 2, 2}, data);
    std::vector<NamedTensor<double>> inputs = s.params();
    inputs.push_back({"input", x});
    auto rep = grad_check<double>([&] { return probe(enc.sem_forward(x, NormMode::train)); }, inputs, {});
    EXPECT_LE(rep.max_rel_error, 1e-4) << "sem: " << rep.worst_tensor;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, EncoderGradient, ::testing::Values(101u, 202u, 303u));
