#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "satcap/config.hpp"
#include "satcap/decoder.hpp"
#include "satcap/encoder.hpp"
#include "satcap/fusion.hpp"
#include "satcap/vocab.hpp"

namespace satcap {

// Teacher-forcing layout for a batch of captions (word ids, no specials):
// inputs are <start> w1..wk, targets w1..wk <end>, both right-padded.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t steps = 0;
  std::vector<int> inputs;
  std::vector<int> targets;

  static TokenBatch from(const std::vector<std::vector<int>>& captions) {
    if (captions.empty()) throw EmptyInputError("token batch: no captions");
    TokenBatch b;
    b.rows = captions.size();
    for (const auto& c : captions) b.steps = std::max(b.steps, c.size() + 1);
    b.inputs.assign(b.rows * b.steps, Vocabulary::kPad);
    b.targets.assign(b.rows * b.steps, Vocabulary::kPad);
    for (std::size_t r = 0; r < b.rows; ++r) {
      const auto& c = captions[r];
      b.inputs[r * b.steps] = Vocabulary::kStart;
      for (std::size_t i = 0; i < c.size(); ++i) {
        b.inputs[r * b.steps + i + 1] = c[i];
        b.targets[r * b.steps + i] = c[i];
      }
      b.targets[r * b.steps + c.size()] = Vocabulary::kEnd;
    }
    return b;
  }
};

template <class T>
struct Caption {
  std::vector<int> ids;  // words only, no <start>/<end>
  // Final decoder layer cross-attention for the query emitted at each step:
  // [steps, heads, HW], and the head average [steps, HW].
  Tensor<T> attention;
  Tensor<T> attention_mean;
  double log_prob = 0.0;
};

template <class T>
class SatCapModel {
 public:
  SatCapModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5a7ca9));
    encoder_ = SceEncoder<T>(cfg_.encoder, store_, rng);
    fusion_ = DifferenceFusion<T>(cfg_.fusion, cfg_.encoder.model_dim, store_, rng);
    decoder_ = CaptionDecoder<T>(cfg_.decoder, cfg_.vocab_size, store_, rng);
  }
  SatCapModel(const SatCapModel&) = delete;
  SatCapModel& operator=(const SatCapModel&) = delete;
  SatCapModel(SatCapModel&&) = default;
  SatCapModel& operator=(SatCapModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const SceEncoder<T>& encoder() const { return encoder_; }
  const DifferenceFusion<T>& fusion() const { return fusion_; }
  const CaptionDecoder<T>& decoder() const { return decoder_; }

  // Both temporal inputs pass the same encoder; returns the fused map.
  Tensor<T> fuse_pair(const Tensor<T>& before, const Tensor<T>& after, NormMode mode) const {
    if (before.shape() != after.shape()) throw DimensionError("model: before/after", before.shape(), after.shape());
    const auto z1 = encoder_.encode(before, mode);
    const auto z2 = encoder_.encode(after, mode);
    return fusion_(z1, z2, mode);
  }

  Tensor<T> logits(const Tensor<T>& before, const Tensor<T>& after, const TokenBatch& batch, const ForwardContext& ctx) const {
    const auto memory = fuse_pair(before, after, ctx.mode);
    return decoder_(batch.inputs, batch.rows, batch.steps, memory, ctx);
  }

  Tensor<T> loss(const Tensor<T>& before, const Tensor<T>& after, const TokenBatch& batch, const ForwardContext& ctx) const {
    return cross_entropy(logits(before, after, batch, ctx), batch.targets, Vocabulary::kPad);
  }

  // Argmax decoding in eval mode; ties go to the lowest id.
  std::vector<Caption<T>> greedy(const Tensor<T>& before, const Tensor<T>& after) const {
    NoGradGuard no_grad;
    const auto memory = fuse_pair(before, after, NormMode::eval);
    const std::size_t n = memory.shape()[0];
    const std::size_t hw = memory.shape()[2] * memory.shape()[3];
    const std::size_t heads = cfg_.decoder.heads, vocab = cfg_.vocab_size;
    std::vector<std::vector<int>> seqs(n, std::vector<int>{Vocabulary::kStart});
    std::vector<std::vector<T>> attn(n);
    std::vector<Caption<T>> out(n);
    std::vector<bool> done(n, false);
    for (std::size_t step = 1; step <= cfg_.decoder.max_len; ++step) {
      std::vector<int> ids;
      for (const auto& s : seqs) ids.insert(ids.end(), s.begin(), s.end());
      DecoderTrace<T> trace;
      const auto lg = decoder_(ids, n, step, memory, ForwardContext::eval(), &trace);
      const auto& cross = trace.cross_probs.back();  // [n, heads, step, hw]
      bool all_done = true;
      for (std::size_t r = 0; r < n; ++r) {
        if (done[r]) {
          seqs[r].push_back(Vocabulary::kPad);
          continue;
        }
        const T* row = lg.data().data() + (r * step + step - 1) * vocab;
        const std::size_t best = argmax(row, vocab);
        out[r].log_prob += log_softmax_at(row, vocab, best);
        for (std::size_t h = 0; h < heads; ++h) {
          const T* a = cross.data().data() + ((r * heads + h) * step + step - 1) * hw;
          attn[r].insert(attn[r].end(), a, a + hw);
        }
        seqs[r].push_back(static_cast<int>(best));
        if (static_cast<int>(best) == Vocabulary::kEnd) {
          done[r] = true;
        } else {
          out[r].ids.push_back(static_cast<int>(best));
          all_done = false;
        }
      }
      if (all_done) break;
    }
    for (std::size_t r = 0; r < n; ++r) finish_attention(out[r], std::move(attn[r]), heads, hw);
    return out;
  }

  // Beam search for one pair; hypotheses ranked by log-prob / length, where
  // length counts emitted tokens including <end>.
  Caption<T> beam(const Tensor<T>& before, const Tensor<T>& after, std::size_t width = 3) const {
    NoGradGuard no_grad;
    if (width == 0) throw ConfigError("beam: width must be >= 1");
    const auto memory = fuse_pair(before, after, NormMode::eval);
    if (memory.shape()[0] != 1) throw ContractError("beam: expects a single pair");
    const std::size_t vocab = cfg_.vocab_size;
    struct Hyp {
      std::vector<int> seq;
      double log_prob;
    };
    auto norm_score = [](const Hyp& h) { return h.log_prob / static_cast<double>(h.seq.size() - 1); };
    std::vector<Hyp> live{{{Vocabulary::kStart}, 0.0}};
    std::vector<Hyp> finished;
    for (std::size_t step = 1; step <= cfg_.decoder.max_len && !live.empty(); ++step) {
      std::vector<int> ids;
      for (const auto& h : live) ids.insert(ids.end(), h.seq.begin(), h.seq.end());
      std::vector<Tensor<T>> copies(live.size(), memory);
      const auto lg = decoder_(ids, live.size(), step, concat(copies, 0), ForwardContext::eval());
      std::vector<Hyp> cand;
      for (std::size_t b = 0; b < live.size(); ++b) {
        const T* row = lg.data().data() + (b * step + step - 1) * vocab;
        for (std::size_t v = 0; v < vocab; ++v) {
          if (static_cast<int>(v) == Vocabulary::kPad || static_cast<int>(v) == Vocabulary::kStart) continue;
          Hyp h = live[b];
          h.seq.push_back(static_cast<int>(v));
          h.log_prob += log_softmax_at(row, vocab, v);
          cand.push_back(std::move(h));
        }
      }
      std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.log_prob > b.log_prob; });
      live.clear();
      for (auto& h : cand) {
        if (live.size() >= width) break;
        if (h.seq.back() == Vocabulary::kEnd) {
          finished.push_back(std::move(h));
        } else {
          live.push_back(std::move(h));
        }
      }
      if (finished.size() >= width) break;
    }
    for (auto& h : live) finished.push_back(std::move(h));
    std::stable_sort(finished.begin(), finished.end(),
                     [&](const Hyp& a, const Hyp& b) { return norm_score(a) > norm_score(b); });
    const Hyp& best = finished.front();
    Caption<T> c;
    for (std::size_t i = 1; i < best.seq.size(); ++i) {
      if (best.seq[i] != Vocabulary::kEnd) c.ids.push_back(best.seq[i]);
    }
    c.log_prob = best.log_prob;
    return c;
  }

 private:
  // <pad> and <start> are never valid outputs.
  static std::size_t argmax(const T* row, std::size_t n) {
    std::size_t best = Vocabulary::kEnd;
    for (std::size_t j = best + 1; j < n; ++j) {
      if (row[j] > row[best]) best = j;
    }
    return best;
  }

  static double log_softmax_at(const T* row, std::size_t n, std::size_t j) {
    double mx = row[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
    return static_cast<double>(row[j]) - mx - std::log(z);
  }

  static void finish_attention(Caption<T>& c, std::vector<T> values, std::size_t heads, std::size_t hw) {
    const std::size_t steps = values.size() / (heads * hw);
    std::vector<T> mean(steps * hw, T(0));
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t p = 0; p < hw; ++p) mean[s * hw + p] += values[(s * heads + h) * hw + p] / static_cast<T>(heads);
    c.attention = Tensor<T>::from({steps, heads, hw}, std::move(values));
    c.attention_mean = Tensor<T>::from({steps, hw}, std::move(mean));
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  SceEncoder<T> encoder_;
  DifferenceFusion<T> fusion_;
  CaptionDecoder<T> decoder_;
};

}  // namespace satcap
