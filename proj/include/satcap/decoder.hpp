#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "satcap/config.hpp"
#include "satcap/nn.hpp"

namespace satcap {

template <class T>
struct DecoderLayer {
  Linear<T> self_q, self_k, self_v, self_out;
  LayerNorm<T> self_norm;
  Linear<T> cross_q, cross_k, cross_v, cross_out;
  LayerNorm<T> cross_norm;
  Linear<T> fc1, fc2;
  LayerNorm<T> mlp_norm;
};

// Attention weights captured during a forward pass, one entry per layer.
template <class T>
struct DecoderTrace {
  std::vector<Tensor<T>> self_probs;   // [N, heads, T, T]
  std::vector<Tensor<T>> cross_probs;  // [N, heads, T, HW]
};

// Post-norm transformer decoder: masked self-attention, cross-attention over
// the fused map, ReLU MLP, each followed by residual add and LayerNorm.
template <class T>
class CaptionDecoder {
 public:
  CaptionDecoder() = default;
  CaptionDecoder(const DecoderConfig& cfg, std::size_t vocab_size, ParamStore<T>& store, Rng& rng)
      : cfg_(cfg), vocab_size_(vocab_size) {
    cfg_.validate();
    const auto c = cfg_.model_dim;
    embed_ = store.param("decoder.embed", init::normal<T>({vocab_size, c}, 0.02, rng));
    pos_ = store.param("decoder.pos", init::normal<T>({cfg_.max_len, c}, 0.02, rng));
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      const std::string p = "decoder.layer" + std::to_string(i);
      DecoderLayer<T> l;
      l.self_q = Linear<T>(store, p + ".self.q", c, c, rng);
      l.self_k = Linear<T>(store, p + ".self.k", c, c, rng);
      l.self_v = Linear<T>(store, p + ".self.v", c, c, rng);
      l.self_out = Linear<T>(store, p + ".self.out", c, c, rng);
      l.self_norm = LayerNorm<T>(store, p + ".self_norm", c);
      l.cross_q = Linear<T>(store, p + ".cross.q", c, c, rng);
      l.cross_k = Linear<T>(store, p + ".cross.k", c, c, rng);
      l.cross_v = Linear<T>(store, p + ".cross.v", c, c, rng);
      l.cross_out = Linear<T>(store, p + ".cross.out", c, c, rng);
      l.cross_norm = LayerNorm<T>(store, p + ".cross_norm", c);
      l.fc1 = Linear<T>(store, p + ".mlp.fc1", c, cfg_.hidden(), rng);
      l.fc2 = Linear<T>(store, p + ".mlp.fc2", cfg_.hidden(), c, rng);
      l.mlp_norm = LayerNorm<T>(store, p + ".mlp_norm", c);
      layers_.push_back(std::move(l));
    }
    head_ = Linear<T>(store, "decoder.head", c, vocab_size, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }
  const std::vector<DecoderLayer<T>>& layers() const { return layers_; }
  const Linear<T>& head() const { return head_; }
  const Tensor<T>& embed() const { return embed_; }
  const Tensor<T>& positions() const { return pos_; }

  // ids: n rows of t token ids (row-major); memory: fused map [N, C, H, W].
  // Returns logits [N, t, V].
  Tensor<T> operator()(const std::vector<int>& ids, std::size_t n, std::size_t t, const Tensor<T>& memory,
                       const ForwardContext& ctx, DecoderTrace<T>* trace = nullptr) const {
    if (t == 0 || t > cfg_.max_len) {
      throw ContractError("decoder: sequence length " + std::to_string(t) + " outside [1, " + std::to_string(cfg_.max_len) + "]");
    }
    if (ids.size() != n * t) throw DimensionError("decoder: expected " + std::to_string(n * t) + " token ids");
    if (memory.rank() != 4 || memory.shape()[0] != n || memory.shape()[1] != cfg_.model_dim) {
      throw DimensionError("decoder: memory must be [" + std::to_string(n) + "," + std::to_string(cfg_.model_dim) +
                           ",H,W], got " + shape_str(memory.shape()));
    }
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) throw ContractError("decoder: token id " + std::to_string(id) + " out of range");
    }
    const auto mem = map_to_tokens(memory);
    auto x = add(embedding(embed_, ids, {n, t}), slice(pos_, 0, 0, t));
    x = drop(x, ctx);
    for (const auto& l : layers_) {
      Tensor<T> sp, cp;
      auto sa = l.self_out(multihead_attention(l.self_q(x), l.self_k(x), l.self_v(x), cfg_.heads, true, trace ? &sp : nullptr));
      x = l.self_norm(add(x, drop(sa, ctx)));
      auto ca = l.cross_out(multihead_attention(l.cross_q(x), l.cross_k(mem), l.cross_v(mem), cfg_.heads, false,
                                                trace ? &cp : nullptr));
      x = l.cross_norm(add(x, drop(ca, ctx)));
      auto m = l.fc2(relu(l.fc1(x)));
      x = l.mlp_norm(add(x, drop(m, ctx)));
      if (trace) {
        trace->self_probs.push_back(sp);
        trace->cross_probs.push_back(cp);
      }
    }
    return head_(x);
  }

 private:
  Tensor<T> drop(const Tensor<T>& x, const ForwardContext& ctx) const {
    if (ctx.mode != NormMode::train || ctx.dropout <= 0.0 || !ctx.rng) return x;
    return dropout(x, ctx.dropout, *ctx.rng);
  }

  DecoderConfig cfg_;
  std::size_t vocab_size_ = 0;
  Tensor<T> embed_;
  Tensor<T> pos_;
  std::vector<DecoderLayer<T>> layers_;
  Linear<T> head_;
};

}  // namespace satcap
