#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "satcap/grad_check.hpp"
#include "satcap/ops.hpp"
#include "satcap/random.hpp"

namespace satcap::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Weighted sum with fixed random weights: a scalar probe whose gradient
// exercises every output element differently.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

// Direct 6-loop grouped convolution: x[N,C,H,W], w[Co, C/groups, kh, kw].
inline std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                      std::size_t stride, std::size_t pad, std::size_t groups) {
  const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const auto co = w.shape()[0], cg = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  const auto out_per_group = co / groups;
  std::vector<double> out(n * co * ho * wo, 0.0);
  for (std::size_t b0 = 0; b0 < n; ++b0)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double acc = b.defined() ? b.data()[o] : 0.0;
          const std::size_t g = o / out_per_group;
          for (std::size_t ci = 0; ci < cg; ++ci)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y * stride + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                const std::size_t cin = g * cg + ci;
                acc += w.data()[((o * cg + ci) * kh + dy) * kw + dx] *
                       x.data()[((b0 * c + cin) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
              }
          out[((b0 * co + o) * ho + y) * wo + xx] = acc;
        }
  return out;
}

}  // namespace satcap::testing
