#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "satcap/ops.hpp"
#include "satcap/random.hpp"

namespace satcap {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Ordered registry of trainable parameters and non-trainable buffers.
// Registration order fixes checkpoint layout and optimizer state order.
template <class T>
class ParamStore {
 public:
  Tensor<T> param(std::string name, Tensor<T> t) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), t});
    return t;
  }
  Tensor<T> buffer(std::string name, Tensor<T> t) {
    buffers_.push_back({std::move(name), t});
    return t;
  }

  const std::vector<NamedTensor<T>>& params() const { return params_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
};

// Per-call switches shared by every layer of a forward pass.
struct ForwardContext {
  NormMode mode = NormMode::eval;
  double dropout = 0.0;
  Rng* rng = nullptr;

  static ForwardContext eval() { return {}; }
  static ForwardContext train(double dropout = 0.0, Rng* rng = nullptr) { return {NormMode::train, dropout, rng}; }
};

namespace init {

template <class T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace init

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when disabled

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true) {
    weight = store.param(name + ".weight", init::uniform_fan_in<T>({in, out}, in, rng));
    if (with_bias) bias = store.param(name + ".bias", Tensor<T>::zeros({out}));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [Co, C, k, k]
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride_, Rng& rng, bool with_bias = true)
      : stride(stride_), padding(kernel / 2) {
    weight = store.param(name + ".weight", init::uniform_fan_in<T>({out, in, kernel, kernel}, in * kernel * kernel, rng));
    if (with_bias) bias = store.param(name + ".bias", Tensor<T>::zeros({out}));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }
};

template <class T>
struct DepthwiseConv {
  Tensor<T> weight;  // [C, 1, 3, 3]
  Tensor<T> bias;

  DepthwiseConv() = default;
  DepthwiseConv(ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng) {
    weight = store.param(name + ".weight", init::uniform_fan_in<T>({channels, 1, 3, 3}, 9, rng));
    bias = store.param(name + ".bias", Tensor<T>::zeros({channels}));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return depthwise_conv2d(x, weight, bias); }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;

  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    gamma = store.param(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = store.param(name + ".beta", Tensor<T>::zeros({channels}));
    stats.mean = store.buffer(name + ".running_mean", Tensor<T>::zeros({channels}));
    stats.var = store.buffer(name + ".running_var", Tensor<T>::full({channels}, T(1)));
  }
  // Stats are shared handles, so a const layer can still update them.
  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) const {
    auto s = stats;
    return batch_norm(x, gamma, beta, s, mode);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    gamma = store.param(name + ".gamma", Tensor<T>::full({dim}, T(1)));
    beta = store.param(name + ".beta", Tensor<T>::zeros({dim}));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  bool same_as(const LayerNorm& other) const { return gamma.same_as(other.gamma) && beta.same_as(other.beta); }
};

enum class Activation { none, relu, gelu };

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  switch (act) {
    case Activation::relu: return relu(x);
    case Activation::gelu: return gelu(x);
    case Activation::none: break;
  }
  return x;
}

// conv -> BN -> activation. The conv carries no bias since BN absorbs it.
template <class T>
struct ConvBnAct {
  Conv2d<T> conv;
  BatchNorm<T> bn;
  Activation act = Activation::relu;

  ConvBnAct() = default;
  ConvBnAct(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
            std::size_t stride, Activation act_, Rng& rng)
      : conv(store, name + ".conv", in, out, kernel, stride, rng, false), bn(store, name + ".bn", out), act(act_) {}
  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) const { return activate(bn(conv(x), mode), act); }
};

// [N, C, H, W] <-> [N, H*W, C]
template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("map_to_tokens: expects [N,C,H,W], got " + shape_str(x.shape()));
  const auto n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  return permute(reshape(x, {n, c, hw}), {0, 2, 1});
}

template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3 || x.shape()[1] != h * w) {
    throw DimensionError("tokens_to_map: expects [N," + std::to_string(h * w) + ",C], got " + shape_str(x.shape()));
  }
  const auto n = x.shape()[0], c = x.shape()[2];
  return reshape(permute(x, {0, 2, 1}), {n, c, h, w});
}

// Scaled dot-product attention with `heads` heads. q[N, Lq, C], k/v[N, Lk, C].
// When `probs` is given it receives the softmax weights [N, heads, Lq, Lk].
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, bool causal,
                              Tensor<T>* probs = nullptr) {
  const std::size_t n = q.shape()[0], lq = q.shape()[1], c = q.shape()[2];
  const std::size_t lk = k.shape()[1];
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (k.shape() != v.shape() || k.shape()[0] != n || k.shape()[2] != c) throw DimensionError("attention", q.shape(), k.shape());
  const std::size_t d = c / heads;
  auto split = [&](const Tensor<T>& t, std::size_t len) { return permute(reshape(t, {n, len, heads, d}), {0, 2, 1, 3}); };
  const auto qh = split(q, lq);
  const auto kh = split(k, lk);
  const auto vh = split(v, lk);
  auto scores = scale(bmm(qh, kh, false, true), T(1) / std::sqrt(static_cast<T>(d)));
  auto p = causal ? causal_softmax(scores) : softmax(scores, -1);
  if (probs) *probs = p;
  auto out = bmm(p, vh);
  return reshape(permute(out, {0, 2, 1, 3}), {n, lq, c});
}

}  // namespace satcap
