#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "satcap/decoder.hpp"
#include "satcap/encoder.hpp"
#include "satcap/fusion.hpp"
#include "satcap/grad_check.hpp"
#include "satcap/model.hpp"

namespace satcap {

// Finite-difference checks of every layer type and of the assembled model,
// shared by the grad-check command and the acceptance run.
struct GradCase {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

namespace grad_suite_detail {

inline Tensor<double> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Fixed random weighting of every output element, reduced to a scalar.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, uniform_tensor(y.shape(), rng)));
}

inline GradCase run(std::string name, std::uint64_t seed, const std::function<Tensor<double>()>& loss,
                    std::vector<NamedTensor<double>> inputs, GradCheckOptions opt = {}) {
  return {std::move(name), seed, grad_check<double>(loss, std::move(inputs), opt)};
}

inline EncoderConfig tiny_encoder(std::size_t layers) {
  EncoderConfig c;
  c.use_backbone = false;
  c.backbone_channels = 6;
  c.feature_hw = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.encoder_layers = layers;
  return c;
}

inline ModelConfig desk_model() {
  ModelConfig m;
  m.encoder.use_backbone = false;
  m.encoder.backbone_channels = 8;
  m.encoder.feature_hw = 4;
  m.encoder.model_dim = 16;
  m.encoder.heads = 2;
  m.encoder.encoder_layers = 1;
  m.decoder.model_dim = 16;
  m.decoder.heads = 2;
  m.decoder.layers = 1;
  m.decoder.max_len = 8;
  m.decoder.dropout = 0.0;
  m.vocab_size = 12;
  return m;
}

}  // namespace grad_suite_detail

inline constexpr double kLayerGradTol = 1e-4;
inline constexpr double kModelGradTol = 1e-3;

// Per-layer checks at f64: SEM, SAM, CAM (every local-enhance variant),
// ConvFFN (gated and standard), every fusion method and cosine axis, the
// decoder block with the loss, and cross-entropy alone.
inline std::vector<GradCase> layer_grad_suite(std::uint64_t seed) {
  using namespace grad_suite_detail;
  std::vector<GradCase> out;
  Rng data(seed + 7);
  auto tokens = uniform_tensor({2, 4, 8}, data);
  auto with_input = [](std::vector<NamedTensor<double>> ps, const std::string& name, const Tensor<double>& x) {
    ps.push_back({name, x});
    return ps;
  };
  {
    ParamStore<double> s;
    Rng r(seed);
    SceEncoder<double> enc(tiny_encoder(0), s, r);
    auto x = uniform_tensor({2, 6, 2, 2}, data);
    out.push_back(run("sem", seed, [&] { return probe(enc.sem_forward(x, NormMode::train)); }, with_input(s.params(), "input", x)));
  }
  {
    ParamStore<double> s;
    Rng r(seed);
    SpatialAttention<double> sam(s, "sam", 8, 2, r);
    out.push_back(run("sam", seed, [&] { return probe(sam(tokens)); }, with_input(s.params(), "input", tokens)));
  }
  for (auto local : {LocalEnhance::dwconv, LocalEnhance::conv1x1, LocalEnhance::conv3x3, LocalEnhance::none}) {
    ParamStore<double> s;
    Rng r(seed);
    ChannelAttention<double> cam(s, "cam", 8, local, r);
    out.push_back(run("cam/" + to_string(local), seed, [&] { return probe(cam(tokens, 2, 2, NormMode::train)); },
                      with_input(s.params(), "input", tokens)));
  }
  for (auto variant : {FfnVariant::gated, FfnVariant::standard}) {
    ParamStore<double> s;
    Rng r(seed);
    ConvFfn<double> ffn(s, "ffn", 8, 16, variant, r);
    out.push_back(run("convffn/" + to_string(variant), seed, [&] { return probe(ffn(tokens, 2, 2)); },
                      with_input(s.params(), "input", tokens)));
  }
  for (auto method : {FusionMethod::concat, FusionMethod::sub, FusionMethod::sum, FusionMethod::product}) {
    ParamStore<double> s;
    Rng r(seed);
    DifferenceFusion<double> fuse({method, CosineAxis::channel, 1e-8}, 4, s, r);
    Rng d(seed + 1);
    auto z1 = uniform_tensor({2, 4, 3, 3}, d), z2 = uniform_tensor({2, 4, 3, 3}, d);
    out.push_back(run("fusion/" + to_string(method), seed, [&] { return probe(fuse(z1, z2, NormMode::train)); },
                      with_input(with_input(s.params(), "z1", z1), "z2", z2)));
  }
  for (auto axis : {CosineAxis::channel, CosineAxis::height, CosineAxis::width, CosineAxis::height_x_width, CosineAxis::height_and_width,
                    CosineAxis::channel_hw, CosineAxis::channel_h_w}) {
    Rng d(seed + 2);
    auto z1 = uniform_tensor({2, 3, 2, 3}, d), z2 = uniform_tensor({2, 3, 2, 3}, d);
    out.push_back(run("cosine/" + to_string(axis), seed, [&] { return probe(cosine_map(z1, z2, axis)); }, {{"z1", z1}, {"z2", z2}}));
  }
  {
    ParamStore<double> s;
    Rng r(seed);
    DecoderConfig dc;
    dc.model_dim = 4;
    dc.heads = 2;
    dc.max_len = 6;
    dc.dropout = 0.0;
    CaptionDecoder<double> dec(dc, 7, s, r);
    Rng d(seed + 1);
    // Unit-scale embeddings keep the first LayerNorm away from its
    // high-curvature regime at the tiny init variance.
    for (auto t : {dec.embed(), dec.positions()})
      for (auto& v : t.mutable_data()) v = d.uniform(-1, 1);
    auto mem = uniform_tensor({2, 4, 2, 2}, d);
    const std::vector<int> ids{1, 5, 6, 4, 1, 4, 6, 6};
    const std::vector<int> targets{5, 6, 4, 2, 4, 6, 2, 0};
    out.push_back(run("decoder+loss", seed,
                      [&] { return cross_entropy(dec(ids, 2, 4, mem, ForwardContext::eval()), targets, Vocabulary::kPad); },
                      with_input(s.params(), "memory", mem)));
  }
  {
    Rng d(seed + 3);
    auto logits = uniform_tensor({4, 6}, d, -2, 2);
    out.push_back(run("cross_entropy", seed, [&] { return cross_entropy(logits, {1, 0, 5, 3}, 0); }, {{"logits", logits}}));
  }
  return out;
}

// Whole model at C=16, 2 heads, E=1, D=1, 4x4 features, |V|=12, BN in train
// mode; each parameter tensor is sampled.
inline std::vector<GradCase> model_grad_suite(std::uint64_t seed, bool with_backbone = true) {
  using namespace grad_suite_detail;
  std::vector<GradCase> out;
  GradCheckOptions opt;
  opt.seed = seed;
  opt.tol = kModelGradTol;
  opt.refine = 2;
  const auto batch = TokenBatch::from({{4, 7, 9}, {5, 11}});
  {
    SatCapModel<double> model(desk_model(), seed);
    Rng d(seed + 1);
    auto a = uniform_tensor({2, 8, 4, 4}, d), b = uniform_tensor({2, 8, 4, 4}, d);
    opt.max_elements = 12;
    out.push_back(run("model/features", seed, [&] { return model.loss(a, b, batch, ForwardContext::train()); }, model.store().params(), opt));
  }
  if (with_backbone) {
    auto cfg = desk_model();
    cfg.encoder.use_backbone = true;
    cfg.encoder.image_size = 8;
    cfg.encoder.backbone_channels = 16;
    SatCapModel<double> model(cfg, seed);
    Rng d(seed + 2);
    auto a = uniform_tensor({2, 3, 8, 8}, d, 0, 1), b = uniform_tensor({2, 3, 8, 8}, d, 0, 1);
    opt.max_elements = 6;
    out.push_back(run("model/backbone", seed, [&] { return model.loss(a, b, batch, ForwardContext::train()); }, model.store().params(), opt));
  }
  return out;
}

inline const std::vector<std::uint64_t>& grad_suite_seeds() {
  static const std::vector<std::uint64_t> seeds{101, 202, 303};
  return seeds;
}

}  // namespace satcap
