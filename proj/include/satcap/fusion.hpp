#pragma once

#include <cstddef>
#include <vector>

#include "satcap/config.hpp"
#include "satcap/nn.hpp"

namespace satcap {

// NCHW axis groups reduced for each cosine option. Options with several
// groups average the per-group maps.
inline std::vector<std::vector<std::size_t>> cosine_axis_groups(CosineAxis axis) {
  switch (axis) {
    case CosineAxis::channel: return {{1}};
    case CosineAxis::height: return {{2}};
    case CosineAxis::width: return {{3}};
    case CosineAxis::height_x_width: return {{2, 3}};
    case CosineAxis::height_and_width: return {{2}, {3}};
    case CosineAxis::channel_hw: return {{1}, {2, 3}};
    case CosineAxis::channel_h_w: return {{1}, {2}, {3}};
    case CosineAxis::none: break;
  }
  return {};
}

// Similarity map between z1 and z2 [N, C, H, W]. Reduced axes are kept with
// extent 1 so the map broadcasts back over them; a single group gives e.g.
// [N, 1, H, W] for the channel option. Undefined for CosineAxis::none.
template <class T>
Tensor<T> cosine_map(const Tensor<T>& z1, const Tensor<T>& z2, CosineAxis axis, T eps = T(1e-8)) {
  if (z1.shape() != z2.shape()) throw DimensionError("cosine_map", z1.shape(), z2.shape());
  if (z1.rank() != 4) throw DimensionError("cosine_map: expects [N,C,H,W], got " + shape_str(z1.shape()));
  const auto groups = cosine_axis_groups(axis);
  if (groups.empty()) return {};
  Tensor<T> acc = cosine_similarity(z1, z2, groups[0], eps);
  for (std::size_t g = 1; g < groups.size(); ++g) acc = add(acc, cosine_similarity(z1, z2, groups[g], eps));
  return groups.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(groups.size()));
}

template <class T>
class DifferenceFusion {
 public:
  DifferenceFusion() = default;
  DifferenceFusion(const FusionConfig& cfg, std::size_t dim, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    if (cfg_.method == FusionMethod::concat) {
      reduce_ = ConvBnAct<T>(store, "fusion.reduce", 2 * dim, dim, 1, 1, Activation::relu, rng);
    }
    res1_ = ConvBnAct<T>(store, "fusion.res.conv1", dim, dim, 1, 1, Activation::relu, rng);
    res2_ = ConvBnAct<T>(store, "fusion.res.conv2", dim, dim, 3, 1, Activation::relu, rng);
    res3_ = ConvBnAct<T>(store, "fusion.res.conv3", dim, dim, 1, 1, Activation::none, rng);
  }

  const FusionConfig& config() const { return cfg_; }
  const ConvBnAct<T>& reduce() const { return reduce_; }
  const ConvBnAct<T>& res_conv(std::size_t i) const { return i == 0 ? res1_ : i == 1 ? res2_ : res3_; }

  // Input to the residual block, before refinement.
  Tensor<T> merge(const Tensor<T>& z1, const Tensor<T>& z2, NormMode mode) const {
    const auto sim = cosine_map(z1, z2, cfg_.cosine_axis, static_cast<T>(cfg_.eps));
    const auto a = sim.defined() ? add(z1, sim) : z1;
    const auto b = sim.defined() ? add(z2, sim) : z2;
    switch (cfg_.method) {
      case FusionMethod::concat: return reduce_(concat<T>({a, b}, 1), mode);
      case FusionMethod::sub: return sub(a, b);
      case FusionMethod::sum: return add(a, b);
      case FusionMethod::product: return mul(a, b);
    }
    return a;
  }

  // z1, z2 [N, C, H, W] -> [N, C, H, W]
  Tensor<T> operator()(const Tensor<T>& z1, const Tensor<T>& z2, NormMode mode) const {
    const auto f = merge(z1, z2, mode);
    return add(f, res3_(res2_(res1_(f, mode), mode), mode));
  }

 private:
  FusionConfig cfg_;
  ConvBnAct<T> reduce_;
  ConvBnAct<T> res1_, res2_, res3_;
};

}  // namespace satcap
