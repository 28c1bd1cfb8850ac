#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "satcap/nn.hpp"
#include "satcap/random.hpp"
#include "satcap/tensor.hpp"

namespace satcap {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-4;
  // Denominator floor for the relative error, so entries whose true gradient
  // is ~0 are judged on absolute error instead.
  double floor = 1e-3;
  // 0 checks every element; otherwise a seeded random subset per tensor.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
  // Entries over tol are re-measured with eps / 10 up to this many times.
  // A ReLU kink inside [x - eps, x + eps] spoils one estimate but not a
  // finer one; a wrong analytic gradient stays wrong at every eps.
  std::size_t refine = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;
  double tol = 0.0;

  bool passed() const { return checked > 0 && max_rel_error <= tol; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares reverse-mode gradients of `loss()` with central differences
// (f(x+eps) - f(x-eps)) / 2eps for each listed input. `loss` must rebuild the
// graph from the inputs' current values on every call.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& loss, std::vector<NamedTensor<T>> inputs,
                           const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  backward(loss());
  GradCheckReport report;
  report.tol = opt.tol;
  Rng rng(opt.seed);
  for (auto& in : inputs) {
    auto values = in.tensor.mutable_data();
    std::vector<T> analytic(in.tensor.grad().begin(), in.tensor.grad().end());
    if (analytic.empty()) analytic.assign(values.size(), T(0));
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_elements && idx.size() > opt.max_elements) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_elements);
      std::sort(idx.begin(), idx.end());
    }
    NoGradGuard no_grad;
    for (std::size_t i : idx) {
      const T saved = values[i];
      auto central = [&](double eps) {
        values[i] = static_cast<T>(saved + eps);
        const double up = static_cast<double>(loss().item());
        values[i] = static_cast<T>(saved - eps);
        const double down = static_cast<double>(loss().item());
        values[i] = saved;
        return (up - down) / (2.0 * eps);
      };
      double eps = opt.eps;
      double numeric = central(eps);
      double err = relative_error(static_cast<double>(analytic[i]), numeric, opt.floor);
      for (std::size_t r = 0; r < opt.refine && err > opt.tol; ++r) {
        eps /= 10.0;
        numeric = central(eps);
        err = relative_error(static_cast<double>(analytic[i]), numeric, opt.floor);
        if (r == 0) ++report.refined;
      }
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = err;
        report.worst_tensor = in.name;
        report.worst_index = i;
        report.worst_analytic = static_cast<double>(analytic[i]);
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

// Single-input form: checks d sum-like f(x) / dx.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double eps = 1e-4,
                           double tol = 1e-4) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.tol = tol;
  return grad_check<T>([&] { return f(x); }, {{"x", x}}, opt);
}

}  // namespace satcap
