#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "satcap/config.hpp"
#include "satcap/nn.hpp"

// Siamese spatial-channel attention encoder: desk backbone, semantic-enhanced
// mapping (positional embedding + 1x1 conv stack + depthwise conv), then
// stacked blocks of spatial attention, channel attention and ConvFFN.

namespace satcap {

// Small trainable CNN standing in for a pretrained ResNet: four 3x3
// conv-BN-ReLU stages, the first k of them stride 2.
template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const EncoderConfig& cfg, ParamStore<T>& store, Rng& rng) : in_channels_(cfg.image_channels) {
    const std::size_t co = cfg.backbone_channels;
    const std::size_t widths[4] = {co / 8, co / 4, co / 2, co};
    const std::size_t downsamples = cfg.backbone_downsamples();
    std::size_t in = cfg.image_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      stages_.emplace_back(store, "backbone.stage" + std::to_string(s), in, widths[s], 3, s < downsamples ? 2 : 1,
                           Activation::relu, rng);
      in = widths[s];
    }
  }

  Tensor<T> operator()(const Tensor<T>& images, NormMode mode) const {
    if (images.rank() != 4 || images.shape()[1] != in_channels_) {
      throw DimensionError("extract_features: expected [N," + std::to_string(in_channels_) + ",H,W] images, got " +
                           shape_str(images.shape()));
    }
    Tensor<T> x = images;
    for (const auto& s : stages_) x = s(x, mode);
    return x;
  }

 private:
  std::size_t in_channels_ = 3;
  std::vector<ConvBnAct<T>> stages_;
};

template <class T>
struct SemModule {
  Tensor<T> pos;  // [C_o, H, W]
  ConvBnAct<T> conv1;
  ConvBnAct<T> conv2;
  DepthwiseConv<T> dw;

  SemModule() = default;
  SemModule(const EncoderConfig& cfg, ParamStore<T>& store, Rng& rng) {
    const auto co = cfg.backbone_channels, c = cfg.model_dim, hw = cfg.feature_hw;
    pos = store.param("sem.pos", init::normal<T>({co, hw, hw}, 0.02, rng));
    conv1 = ConvBnAct<T>(store, "sem.conv1", co, c, 1, 1, Activation::relu, rng);
    conv2 = ConvBnAct<T>(store, "sem.conv2", c, c, 1, 1, Activation::relu, rng);
    dw = DepthwiseConv<T>(store, "sem.dwconv", c, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) const {
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != pos.shape()) {
      throw DimensionError("sem_forward: features vs positional embedding", x.shape(), pos.shape());
    }
    return dw(conv2(conv1(add(x, pos), mode), mode));
  }
};

// Multi-head self-attention over the H*W spatial tokens.
template <class T>
struct SpatialAttention {
  Linear<T> q, k, v, out;
  std::size_t heads = 1;

  SpatialAttention() = default;
  SpatialAttention(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads_, Rng& rng)
      : heads(heads_) {
    q = Linear<T>(store, name + ".q", dim, dim, rng, false);
    k = Linear<T>(store, name + ".k", dim, dim, rng, false);
    v = Linear<T>(store, name + ".v", dim, dim, rng, false);
    out = Linear<T>(store, name + ".out", dim, dim, rng, true);
  }

  // x[N, HW, C]; `probs` receives [N, heads, HW, HW].
  Tensor<T> operator()(const Tensor<T>& x, Tensor<T>* probs = nullptr) const {
    return out(multihead_attention(q(x), k(x), v(x), heads, false, probs));
  }
};

// Channel attention: a joint projection gives Q', K', V' (each HW x C);
// A = softmax(Q'^T K' / alpha) is C x C and mixes channels of V'. A local
// branch convolves V' spatially. The module adds its own input back.
template <class T>
struct ChannelAttention {
  Linear<T> qkv;
  Tensor<T> alpha;  // learnable temperature, scalar
  LocalEnhance local = LocalEnhance::dwconv;
  DepthwiseConv<T> dw;
  Conv2d<T> conv;
  BatchNorm<T> bn;
  std::size_t dim = 0;

  ChannelAttention() = default;
  ChannelAttention(ParamStore<T>& store, const std::string& name, std::size_t dim_, LocalEnhance local_, Rng& rng)
      : local(local_), dim(dim_) {
    qkv = Linear<T>(store, name + ".qkv", dim, 3 * dim, rng, true);
    alpha = store.param(name + ".alpha", Tensor<T>::scalar(static_cast<T>(std::sqrt(static_cast<double>(dim)))));
    switch (local) {
      case LocalEnhance::dwconv: dw = DepthwiseConv<T>(store, name + ".local.dwconv", dim, rng); break;
      case LocalEnhance::conv1x1: conv = Conv2d<T>(store, name + ".local.conv", dim, dim, 1, 1, rng, false); break;
      case LocalEnhance::conv3x3: conv = Conv2d<T>(store, name + ".local.conv", dim, dim, 3, 1, rng, false); break;
      case LocalEnhance::none: break;
    }
    if (local != LocalEnhance::none) bn = BatchNorm<T>(store, name + ".local.bn", dim);
  }

  // x[N, HW, C] on an h x w grid; `attn` receives A as [N, C, C].
  Tensor<T> operator()(const Tensor<T>& x, std::size_t h, std::size_t w, NormMode mode, Tensor<T>* attn = nullptr) const {
    const auto proj = qkv(x);
    const auto qp = slice(proj, -1, 0, dim);
    const auto kp = slice(proj, -1, dim, dim);
    const auto vp = slice(proj, -1, 2 * dim, dim);
    const auto a = softmax(div(bmm(qp, kp, true, false), alpha), -1);
    if (attn) *attn = a;
    auto out = bmm(vp, a);
    if (local != LocalEnhance::none) {
      const auto vmap = tokens_to_map(vp, h, w);
      const auto filtered = local == LocalEnhance::dwconv ? dw(vmap) : conv(vmap);
      out = add(out, map_to_tokens(gelu(bn(filtered, mode))));
    }
    return add(out, x);
  }
};

// Gated variant: GELU(x W1 + b1) splits into L1, L2; L1 passes a 3x3
// depthwise conv and gates L2 before the down projection. The standard
// variant convolves the whole hidden feature instead.
template <class T>
struct ConvFfn {
  Linear<T> fc1;
  DepthwiseConv<T> dw;
  Linear<T> fc2;
  FfnVariant variant = FfnVariant::gated;
  std::size_t hidden = 0;

  ConvFfn() = default;
  ConvFfn(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden_, FfnVariant variant_, Rng& rng)
      : variant(variant_), hidden(hidden_) {
    if (variant == FfnVariant::gated && hidden % 2 != 0) {
      throw ConfigError("convffn: hidden width " + std::to_string(hidden) + " cannot be split evenly");
    }
    const std::size_t mixed = variant == FfnVariant::gated ? hidden / 2 : hidden;
    fc1 = Linear<T>(store, name + ".fc1", dim, hidden, rng);
    dw = DepthwiseConv<T>(store, name + ".dwconv", mixed, rng);
    fc2 = Linear<T>(store, name + ".fc2", mixed, dim, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, std::size_t h, std::size_t w) const {
    const auto act = gelu(fc1(x));
    if (variant == FfnVariant::standard) return fc2(map_to_tokens(dw(tokens_to_map(act, h, w))));
    const std::size_t half = hidden / 2;
    const auto l1 = slice(act, -1, 0, half);
    const auto l2 = slice(act, -1, half, half);
    const auto l1_hat = map_to_tokens(dw(tokens_to_map(l1, h, w)));
    return fc2(mul(l1_hat, l2));
  }
};

template <class T>
struct EncoderLayer {
  bool has_sam = false;
  bool has_cam = false;
  LayerNorm<T> sam_norm;
  LayerNorm<T> cam_norm;  // same handles as sam_norm when shared
  LayerNorm<T> ffn_norm;
  SpatialAttention<T> sam;
  ChannelAttention<T> cam;
  ConvFfn<T> ffn;
};

// Attention weights captured during encode(), one entry per layer.
template <class T>
struct EncoderTrace {
  std::vector<Tensor<T>> sam_probs;  // [N, heads, HW, HW]
  std::vector<Tensor<T>> cam_attn;   // [N, C, C]
};

template <class T>
class SceEncoder {
 public:
  SceEncoder() = default;
  SceEncoder(const EncoderConfig& cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.use_backbone) backbone_ = Backbone<T>(cfg_, store, rng);
    sem_ = SemModule<T>(cfg_, store, rng);
    const auto c = cfg_.model_dim;
    const auto ord = cfg_.ordering;
    for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
      const std::string p = "encoder.layer" + std::to_string(i);
      EncoderLayer<T> layer;
      layer.has_sam = ord != Ordering::cam_only;
      layer.has_cam = ord != Ordering::sam_only;
      if (layer.has_sam) layer.sam_norm = LayerNorm<T>(store, p + (cfg_.share_layernorm ? ".norm" : ".sam_norm"), c);
      if (layer.has_cam) {
        if (layer.has_sam && cfg_.share_layernorm) {
          layer.cam_norm = layer.sam_norm;
        } else {
          layer.cam_norm = LayerNorm<T>(store, p + (cfg_.share_layernorm ? ".norm" : ".cam_norm"), c);
        }
      }
      layer.ffn_norm = LayerNorm<T>(store, p + ".ffn_norm", c);
      if (layer.has_sam) layer.sam = SpatialAttention<T>(store, p + ".sam", c, cfg_.heads, rng);
      if (layer.has_cam) layer.cam = ChannelAttention<T>(store, p + ".cam", c, cfg_.cam_local_enhance, rng);
      layer.ffn = ConvFfn<T>(store, p + ".ffn", c, cfg_.hidden(), cfg_.ffn_variant, rng);
      layers_.push_back(std::move(layer));
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }
  const SemModule<T>& sem() const { return sem_; }

  // images[N, 3, S, S] -> [N, C_o, H, W]
  Tensor<T> extract_features(const Tensor<T>& images, NormMode mode) const {
    if (!cfg_.use_backbone) throw ConfigError("extract_features: model configured for precomputed features");
    return backbone_(images, mode);
  }

  // [N, C_o, H, W] -> [N, C, H, W]
  Tensor<T> sem_forward(const Tensor<T>& x, NormMode mode) const { return sem_(x, mode); }

  // Pre-norm residual wrappers over tokens [N, HW, C].
  Tensor<T> sam_forward(const EncoderLayer<T>& layer, const Tensor<T>& x, Tensor<T>* probs = nullptr) const {
    return add(x, layer.sam(layer.sam_norm(x), probs));
  }
  Tensor<T> cam_forward(const EncoderLayer<T>& layer, const Tensor<T>& x, NormMode mode, Tensor<T>* attn = nullptr) const {
    return add(x, layer.cam(layer.cam_norm(x), cfg_.feature_hw, cfg_.feature_hw, mode, attn));
  }
  Tensor<T> convffn_forward(const EncoderLayer<T>& layer, const Tensor<T>& x) const {
    return add(x, layer.ffn(layer.ffn_norm(x), cfg_.feature_hw, cfg_.feature_hw));
  }

  Tensor<T> run_layer(const EncoderLayer<T>& layer, Tensor<T> x, NormMode mode, EncoderTrace<T>* trace = nullptr) const {
    Tensor<T> probs, attn;
    Tensor<T>* pp = trace ? &probs : nullptr;
    Tensor<T>* pa = trace ? &attn : nullptr;
    switch (cfg_.ordering) {
      case Ordering::sam_then_cam: x = cam_forward(layer, sam_forward(layer, x, pp), mode, pa); break;
      case Ordering::cam_then_sam: x = sam_forward(layer, cam_forward(layer, x, mode, pa), pp); break;
      case Ordering::parallel:
        x = add(add(x, layer.sam(layer.sam_norm(x), pp)),
                layer.cam(layer.cam_norm(x), cfg_.feature_hw, cfg_.feature_hw, mode, pa));
        break;
      case Ordering::sam_only: x = sam_forward(layer, x, pp); break;
      case Ordering::cam_only: x = cam_forward(layer, x, mode, pa); break;
    }
    if (trace) {
      if (probs.defined()) trace->sam_probs.push_back(probs);
      if (attn.defined()) trace->cam_attn.push_back(attn);
    }
    return convffn_forward(layer, x);
  }

  // One temporal branch: images (or precomputed features) -> [N, C, H, W].
  Tensor<T> encode(const Tensor<T>& input, NormMode mode, EncoderTrace<T>* trace = nullptr) const {
    const auto features = cfg_.use_backbone ? backbone_(input, mode) : input;
    auto x = map_to_tokens(sem_(features, mode));
    for (const auto& layer : layers_) x = run_layer(layer, x, mode, trace);
    return tokens_to_map(x, cfg_.feature_hw, cfg_.feature_hw);
  }

 private:
  EncoderConfig cfg_;
  Backbone<T> backbone_;
  SemModule<T> sem_;
  std::vector<EncoderLayer<T>> layers_;
};

}  // namespace satcap
