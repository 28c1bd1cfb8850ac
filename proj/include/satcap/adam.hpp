#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "satcap/config.hpp"
#include "satcap/nn.hpp"

namespace satcap {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamConfig from(const TrainConfig& t) { return {t.learning_rate, t.beta1, t.beta2, t.adam_eps}; }
};

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;  // one per parameter, in store order
  std::vector<std::vector<T>> v;
};

// L2 norm over every parameter gradient; rescales all of them in place when
// it exceeds max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

template <class T>
class Adam {
 public:
  Adam(std::vector<NamedTensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.learning_rate > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    for (const auto& p : params_) {
      state_.m.emplace_back(p.tensor.numel(), T(0));
      state_.v.emplace_back(p.tensor.numel(), T(0));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  const AdamState<T>& state() const { return state_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }

  void set_state(AdamState<T> s) {
    if (s.m.size() != params_.size() || s.v.size() != params_.size()) throw LoadError("adam: moment count does not match parameters");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (s.m[i].size() != params_[i].tensor.numel() || s.v[i].size() != params_[i].tensor.numel()) {
        throw ShapeConflictError("adam: moment size mismatch for '" + params_[i].name + "'");
      }
    }
    state_ = std::move(s);
  }

  // Parameters without a gradient are treated as having a zero gradient.
  // Every gradient is checked before any parameter moves.
  void step() {
    for (const auto& p : params_) {
      for (T g : p.tensor.grad()) {
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam: non-finite gradient in '" + p.name + "'");
      }
    }
    ++state_.step;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i].tensor;
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
        const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
        const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update = cfg_.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
      }
    }
  }

 private:
  std::vector<NamedTensor<T>> params_;
  AdamConfig cfg_;
  AdamState<T> state_;
};

}  // namespace satcap
