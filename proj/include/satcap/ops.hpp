#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "satcap/gemm.hpp"
#include "satcap/random.hpp"
#include "satcap/tensor.hpp"

// Differentiable tensor operations. Every op records a backward closure when
// any input requires a gradient; see tensor.hpp for the sweep.

namespace satcap {

namespace detail {

inline std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(axis);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw DimensionError(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// For each flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::uint32_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    in_stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = numel_of(out);
  std::vector<std::uint32_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t f = 0; f < n; ++f) {
    idx[f] = static_cast<std::uint32_t>(offset);
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      offset += in_stride[d];
      if (counter[d] < out[d]) break;
      offset -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { add, sub, mul, div };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape(), op);
  const std::size_t n = numel_of(out_shape);
  const bool a_same = a.shape() == out_shape;
  const bool b_same = b.shape() == out_shape;
  auto ia = std::make_shared<std::vector<std::uint32_t>>();
  auto ib = std::make_shared<std::vector<std::uint32_t>>();
  if (!a_same) *ia = broadcast_index(out_shape, a.shape());
  if (!b_same) *ib = broadcast_index(out_shape, b.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = pa[a_same ? i : (*ia)[i]];
    const T y = pb[b_same ? i : (*ib)[i]];
    switch (kind) {
      case BinaryKind::add: out[i] = x + y; break;
      case BinaryKind::sub: out[i] = x - y; break;
      case BinaryKind::mul: out[i] = x * y; break;
      case BinaryKind::div: out[i] = x / y; break;
    }
  }
  return make_result<T>(out_shape, std::move(out), {a, b}, [a, b, ia, ib, a_same, b_same, kind](Node<T>& self) {
    const T* g = self.grad.data();
    const std::size_t n = self.grad.size();
    T* ga = grad_of(a);
    T* gb = grad_of(b);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ja = a_same ? i : (*ia)[i];
      const std::size_t jb = b_same ? i : (*ib)[i];
      switch (kind) {
        case BinaryKind::add:
          if (ga) ga[ja] += g[i];
          if (gb) gb[jb] += g[i];
          break;
        case BinaryKind::sub:
          if (ga) ga[ja] += g[i];
          if (gb) gb[jb] -= g[i];
          break;
        case BinaryKind::mul:
          if (ga) ga[ja] += g[i] * pb[jb];
          if (gb) gb[jb] += g[i] * pa[ja];
          break;
        case BinaryKind::div:
          if (ga) ga[ja] += g[i] / pb[jb];
          if (gb) gb[jb] -= g[i] * pa[ja] / (pb[jb] * pb[jb]);
          break;
      }
    }
  });
}

// Elementwise map with derivative expressed through input x and output y.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  auto result = make_result<T>(x.shape(), std::move(out), {x}, [x, df](Node<T>& self) {
    T* gx = grad_of(x);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* px = x.data().data();
    const T* py = self.data->data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i] * df(px[i], py[i]);
  });
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting, trailing alignment)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::mul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::div, "div");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T c = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T u = k * (v + c * v * v * v);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * c * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

// Shares the value buffer with the input.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw DimensionError("reshape", x.shape(), shape);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = x.node()->data;
  if (grad_enabled() && x.requires_grad()) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents.push_back(x.ptr());
    n->backward_fn = [x](Node<T>& self) {
      T* gx = detail::grad_of(x);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw DimensionError("permute: permutation rank differs from " + shape_str(in));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw DimensionError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::uint32_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t f = 0; f < n; ++f) {
    (*map)[f] = static_cast<std::uint32_t>(offset);
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      offset += src_stride[d];
      if (counter[d] < out_shape[d]) break;
      offset -= src_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (std::size_t f = 0; f < n; ++f) out[f] = px[(*map)[f]];
  return detail::make_result<T>(out_shape, std::move(out), {x}, [x, map](Node<T>& self) {
    T* gx = detail::grad_of(x);
    for (std::size_t f = 0; f < self.grad.size(); ++f) gx[(*map)[f]] += self.grad[f];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw EmptyInputError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::norm_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != ax && p.shape()[d] != first[d]) throw DimensionError("concat", first, p.shape());
    }
    out_shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<T> out(numel_of(out_shape));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[ax] * inner;
    const T* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * row, row, out.data() + o * out_row + col);
    col += row;
  }
  return detail::make_result<T>(out_shape, std::move(out), parts, [parts, outer, inner, out_row, ax](Node<T>& self) {
    std::size_t col = 0;
    for (const auto& p : parts) {
      const std::size_t row = p.shape()[ax] * inner;
      if (T* gp = detail::grad_of(p)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * out_row + col;
          for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[i];
        }
      }
      col += row;
    }
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "slice");
  if (start + length > x.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") exceeds " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t in_row = x.shape()[ax] * inner;
  const std::size_t out_row = length * inner;
  std::vector<T> out(numel_of(out_shape));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(px + o * in_row + start * inner, out_row, out.data() + o * out_row);
  }
  return detail::make_result<T>(out_shape, std::move(out), {x}, [x, outer, inner, in_row, out_row, start](Node<T>& self) {
    T* gx = detail::grad_of(x);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* g = self.grad.data() + o * out_row;
      T* dst = gx + o * in_row + start * inner;
      for (std::size_t i = 0; i < out_row; ++i) dst[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({}, {acc}, {x}, [x](Node<T>& self) {
    T* gx = detail::grad_of(x);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw EmptyInputError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Matrix products

// Batched product over leading dims, which must agree exactly:
// out[..., m, n] = op(a)[..., m, k] * op(b)[..., k, n].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw DimensionError("bmm", a.shape(), b.shape());
  const std::size_t r = a.rank();
  std::size_t batch = 1;
  for (std::size_t d = 0; d + 2 < r; ++d) {
    if (a.shape()[d] != b.shape()[d]) throw DimensionError("bmm: batch extents", a.shape(), b.shape());
    batch *= a.shape()[d];
  }
  const std::size_t m = trans_a ? a.shape()[r - 1] : a.shape()[r - 2];
  const std::size_t k = trans_a ? a.shape()[r - 2] : a.shape()[r - 1];
  const std::size_t kb = trans_b ? b.shape()[r - 1] : b.shape()[r - 2];
  const std::size_t n = trans_b ? b.shape()[r - 2] : b.shape()[r - 1];
  if (k != kb) throw DimensionError("matmul: inner extents differ", a.shape(), b.shape());
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(trans_a, trans_b, m, n, k, pa + i * m * k, pb + i * k * n, out.data() + i * m * n, false);
  }
  return detail::make_result<T>(out_shape, std::move(out), {a, b}, [a, b, trans_a, trans_b, batch, m, n, k](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* ga = detail::grad_of(a);
    T* gb = detail::grad_of(b);
    for (std::size_t i = 0; i < batch; ++i) {
      const T* gi = g + i * m * n;
      const T* ai = pa + i * m * k;
      const T* bi = pb + i * k * n;
      if (ga) {
        if (!trans_a) {
          detail::gemm(false, !trans_b, m, k, n, gi, bi, ga + i * m * k, true);
        } else {
          detail::gemm(trans_b, true, k, m, n, bi, gi, ga + i * m * k, true);
        }
      }
      if (gb) {
        if (!trans_b) {
          detail::gemm(!trans_a, false, k, n, m, ai, gi, gb + i * k * n, true);
        } else {
          detail::gemm(true, trans_a, n, k, m, gi, ai, gb + i * k * n, true);
        }
      }
    }
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expects rank-2 operands", a.shape(), b.shape());
  return bmm(a, b);
}

// y[..., out] = x[..., in] * w[in, out] + bias[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.shape()[0]) {
    throw DimensionError("linear", x.shape(), w.shape());
  }
  const std::size_t in = w.shape()[0];
  const std::size_t outf = w.shape()[1];
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != outf)) {
    throw DimensionError("linear: bias", bias.shape(), w.shape());
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<T> out(rows * outf);
  if (bias.defined()) {
    const T* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pb, outf, out.data() + r * outf);
  }
  detail::gemm(false, false, rows, outf, in, x.data().data(), w.data().data(), out.data(), bias.defined());
  return detail::make_result<T>(out_shape, std::move(out), {x, w, bias}, [x, w, bias, rows, in, outf](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* gx = detail::grad_of(x)) detail::gemm(false, true, rows, in, outf, g, w.data().data(), gx, true);
    if (T* gw = detail::grad_of(w)) detail::gemm(true, false, in, outf, rows, x.data().data(), g, gw, true);
    if (T* gb = detail::grad_of(bias)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {
template <class T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN in input");
  }
}
}  // namespace detail

// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  detail::check_finite(x.data(), "softmax");
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, outer, inner, len](Node<T>& self) {
    T* gx = detail::grad_of(x);
    const T* y = self.data->data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
        }
      }
    }
  });
}

// Softmax over the last axis where row i (second-to-last axis) only sees
// columns j <= i; masked entries are exactly zero.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
  detail::check_finite(x.data(), "causal_softmax");
  if (x.rank() < 2) throw DimensionError("causal_softmax: needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.shape()[x.rank() - 2];
  const std::size_t cols = x.shape()[x.rank() - 1];
  const std::size_t mats = x.numel() / (rows * cols);
  std::vector<T> out(x.numel(), T(0));
  const T* px = x.data().data();
  for (std::size_t m = 0; m < mats; ++m) {
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t base = (m * rows + i) * cols;
      const std::size_t visible = std::min(cols, i + 1);
      T mx = px[base];
      for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, px[base + j]);
      T total = T(0);
      for (std::size_t j = 0; j < visible; ++j) {
        out[base + j] = std::exp(px[base + j] - mx);
        total += out[base + j];
      }
      for (std::size_t j = 0; j < visible; ++j) out[base + j] /= total;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, mats, rows, cols](Node<T>& self) {
    T* gx = detail::grad_of(x);
    const T* y = self.data->data();
    const T* g = self.grad.data();
    for (std::size_t m = 0; m < mats; ++m) {
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t base = (m * rows + i) * cols;
        const std::size_t visible = std::min(cols, i + 1);
        T dot = T(0);
        for (std::size_t j = 0; j < visible; ++j) dot += g[base + j] * y[base + j];
        for (std::size_t j = 0; j < visible; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

// Standardizes over the last axis, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * pg[j] + pb[j];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, rows, d](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pg = gamma.data().data();
    T* gx = detail::grad_of(x);
    T* ggamma = detail::grad_of(gamma);
    T* gbeta = detail::grad_of(beta);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * d;
      const T* hr = xhat->data() + r * d;
      if (ggamma || gbeta) {
        for (std::size_t j = 0; j < d; ++j) {
          if (ggamma) ggamma[j] += gr[j] * hr[j];
          if (gbeta) gbeta[j] += gr[j];
        }
      }
      if (gx) {
        T m1 = T(0), m2 = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = gr[j] * pg[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        const T is = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += is * (gr[j] * pg[j] - m1 - hr[j] * m2);
      }
    }
  });
}

enum class NormMode { train, eval };

// Running statistics owned by a batch-norm layer (never differentiated).
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

// Per-channel normalization of x[N, C, ...] over batch and trailing dims.
// Train mode uses batch statistics and folds them into `stats` with the given
// momentum (unbiased variance for the running estimate); eval mode reads them.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     NormMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() < 2) throw DimensionError("batch_norm: expects [N, C, ...], got " + shape_str(x.shape()));
  const std::size_t batch = x.shape()[0];
  const std::size_t ch = x.shape()[1];
  if (batch == 0 || x.numel() == 0) throw EmptyInputError("batch_norm: batch of size 0");
  if (gamma.numel() != ch || beta.numel() != ch) throw DimensionError("batch_norm", x.shape(), gamma.shape());
  const std::size_t spatial = x.numel() / (batch * ch);
  const std::size_t count = batch * spatial;
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(ch);
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < ch; ++c) {
    T mu, var;
    if (mode == NormMode::train) {
      mu = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = px + (n * ch + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) mu += p[s];
      }
      mu /= static_cast<T>(count);
      var = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = px + (n * ch + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) var += (p[s] - mu) * (p[s] - mu);
      }
      const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : var;
      var /= static_cast<T>(count);
      auto rm = stats.mean.mutable_data();
      auto rv = stats.var.mutable_data();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    } else {
      mu = stats.mean.data()[c];
      var = stats.var.data()[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * ch + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T h = (px[off + s] - mu) * is;
        (*xhat)[off + s] = h;
        out[off + s] = h * pg[c] + pb[c];
      }
    }
  }
  const bool train = mode == NormMode::train;
  return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                                [x, gamma, beta, xhat, inv_std, batch, ch, spatial, count, train](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pg = gamma.data().data();
    T* gx = detail::grad_of(x);
    T* ggamma = detail::grad_of(gamma);
    T* gbeta = detail::grad_of(beta);
    for (std::size_t c = 0; c < ch; ++c) {
      T sg = T(0), sgh = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * ch + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          sg += g[off + s];
          sgh += g[off + s] * (*xhat)[off + s];
        }
      }
      if (ggamma) ggamma[c] += sgh;
      if (gbeta) gbeta[c] += sg;
      if (!gx) continue;
      const T k = pg[c] * (*inv_std)[c];
      const T mg = sg / static_cast<T>(count);
      const T mgh = sgh / static_cast<T>(count);
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * ch + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          gx[off + s] += train ? k * (g[off + s] - mg - (*xhat)[off + s] * mgh) : k * g[off + s];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW, cross-correlation)

// x[N, C, H, W] * w[Co, C, kh, kw] + b[Co]; square padding and stride.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, std::size_t stride = 1,
                 std::size_t padding = 0) {
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("conv2d", x.shape(), w.shape());
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::size_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != ch) throw DimensionError("conv2d: channel mismatch", x.shape(), w.shape());
  if (kh % 2 == 0 || kw % 2 == 0) throw UnsupportedConfigError("conv2d: kernel extents must be odd");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (b.defined() && b.numel() != co) throw DimensionError("conv2d: bias", b.shape(), w.shape());
  if (h + 2 * padding < kh || wd + 2 * padding < kw) throw DimensionError("conv2d: kernel larger than input", x.shape(), w.shape());
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t kdim = ch * kh * kw;
  const std::size_t plane = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // im2col rows are (c, dy, dx), columns are output positions.
  auto im2col = [=](const T* src, T* cols) {
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t dy = 0; dy < kh; ++dy) {
        for (std::size_t dx = 0; dx < kw; ++dx) {
          T* row = cols + ((c * kh + dy) * kw + dx) * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(padding);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(padding);
              row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd))
                                      ? T(0)
                                      : src[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  };

  std::vector<T> out(batch * co * plane);
  std::vector<T> cols(pointwise ? 0 : kdim * plane);
  const T* px = x.data().data();
  const T* pw = w.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    T* dst = out.data() + n * co * plane;
    if (b.defined()) {
      for (std::size_t o = 0; o < co; ++o) std::fill_n(dst + o * plane, plane, b.data()[o]);
    }
    const T* src = px + n * ch * h * wd;
    if (!pointwise) im2col(src, cols.data());
    detail::gemm(false, false, co, plane, kdim, pw, pointwise ? src : cols.data(), dst, b.defined());
  }
  return detail::make_result<T>({batch, co, ho, wo}, std::move(out), {x, w, b},
                                [=](Node<T>& self) {
    const T* g = self.grad.data();
    T* gx = detail::grad_of(x);
    T* gw = detail::grad_of(w);
    T* gb = detail::grad_of(b);
    const T* px = x.data().data();
    const T* pw = w.data().data();
    std::vector<T> cols(pointwise ? 0 : kdim * plane);
    std::vector<T> dcols(pointwise || !gx ? 0 : kdim * plane);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* gn = g + n * co * plane;
      const T* src = px + n * ch * h * wd;
      if (gb) {
        for (std::size_t o = 0; o < co; ++o) {
          for (std::size_t p = 0; p < plane; ++p) gb[o] += gn[o * plane + p];
        }
      }
      if (gw) {
        if (!pointwise) im2col(src, cols.data());
        detail::gemm(false, true, co, kdim, plane, gn, pointwise ? src : cols.data(), gw, true);
      }
      if (gx) {
        T* gxn = gx + n * ch * h * wd;
        if (pointwise) {
          detail::gemm(true, false, kdim, plane, co, pw, gn, gxn, true);
          continue;
        }
        detail::gemm(true, false, kdim, plane, co, pw, gn, dcols.data(), false);
        for (std::size_t c = 0; c < ch; ++c) {
          for (std::size_t dy = 0; dy < kh; ++dy) {
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const T* row = dcols.data() + ((c * kh + dy) * kw + dx) * plane;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  gxn[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
                }
              }
            }
          }
        }
      }
    }
  });
}

// 3x3 depthwise convolution, padding 1, stride 1: one filter per channel.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("depthwise_conv2d", x.shape(), w.shape());
  if (w.shape()[2] != 3 || w.shape()[3] != 3) {
    throw UnsupportedConfigError("depthwise_conv2d: only 3x3 kernels are supported, got " + shape_str(w.shape()));
  }
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  if (w.shape()[0] != ch || w.shape()[1] != 1) throw DimensionError("depthwise_conv2d: channel mismatch", x.shape(), w.shape());
  if (b.defined() && b.numel() != ch) throw DimensionError("depthwise_conv2d: bias", b.shape(), w.shape());
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const T* pw = w.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T* src = px + (n * ch + c) * h * wd;
      T* dst = out.data() + (n * ch + c) * h * wd;
      const T* k = pw + c * 9;
      const T bias = b.defined() ? b.data()[c] : T(0);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < wd; ++xx) {
          T acc = bias;
          for (int dy = -1; dy <= 1; ++dy) {
            const long iy = static_cast<long>(y) + dy;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const long ix = static_cast<long>(xx) + dx;
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              acc += k[(dy + 1) * 3 + (dx + 1)] * src[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)];
            }
          }
          dst[y * wd + xx] = acc;
        }
      }
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x, w, b}, [x, w, b, batch, ch, h, wd](Node<T>& self) {
    const T* g = self.grad.data();
    T* gx = detail::grad_of(x);
    T* gw = detail::grad_of(w);
    T* gb = detail::grad_of(b);
    const T* px = x.data().data();
    const T* pw = w.data().data();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t off = (n * ch + c) * h * wd;
        const T* gc = g + off;
        const T* src = px + off;
        const T* k = pw + c * 9;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t xx = 0; xx < wd; ++xx) {
            const T go = gc[y * wd + xx];
            if (gb) gb[c] += go;
            for (int dy = -1; dy <= 1; ++dy) {
              const long iy = static_cast<long>(y) + dy;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const long ix = static_cast<long>(xx) + dx;
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                const std::size_t si = static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix);
                const std::size_t ki = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
                if (gw) gw[c * 9 + ki] += go * src[si];
                if (gx) gx[off + si] += go * k[ki];
              }
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence helpers

// table[V, C] gathered at ids laid out as `index_shape`; result is index_shape + [C].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids, const Shape& index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(index_shape) != ids.size()) throw DimensionError("embedding: index shape does not match id count");
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  std::vector<T> out(ids.size() * dim);
  const T* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * dim, dim, out.data() + i * dim);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(dim);
  return detail::make_result<T>(out_shape, std::move(out), {table}, [table, ids, dim](Node<T>& self) {
    T* gt = detail::grad_of(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = gt + static_cast<std::size_t>(ids[i]) * dim;
      const T* g = self.grad.data() + i * dim;
      for (std::size_t j = 0; j < dim; ++j) row[j] += g[j];
    }
  });
}

// Inverted dropout; identity when p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: probability must be < 1");
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? T(0) : keep;
    out[i] = x.data()[i] * (*mask)[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, mask](Node<T>& self) {
    T* gx = detail::grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
  });
}

// Mean token cross-entropy of logits[..., V] against integer targets;
// positions whose target equals `ignore_id` are excluded.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, int ignore_id) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count differs from logit rows");
  detail::check_finite(logits.data(), "cross_entropy");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  const T* pl = logits.data().data();
  T total = T(0);
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = pl + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const T logz = mx + std::log(z);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = std::exp(row[j] - logz);
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ContractError("cross_entropy: target id " + std::to_string(targets[r]) + " out of range");
    }
    total += logz - row[targets[r]];
    ++counted;
  }
  if (counted == 0) throw EmptyInputError("cross_entropy: every target position is padding");
  const T inv = T(1) / static_cast<T>(counted);
  return detail::make_result<T>({}, {total * inv}, {logits}, [logits, targets, ignore_id, probs, vocab, rows, inv](Node<T>& self) {
    T* gl = detail::grad_of(logits);
    const T g = self.grad[0] * inv;
    for (std::size_t r = 0; r < rows; ++r) {
      if (targets[r] == ignore_id) continue;
      for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * (*probs)[r * vocab + j];
      gl[r * vocab + static_cast<std::size_t>(targets[r])] -= g;
    }
  });
}

// Cosine similarity between a and b along `axes`, kept as size-1 dims so the
// result broadcasts back over them. Denominator is max(|a||b|, eps), so a zero
// vector yields 0.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, const std::vector<std::size_t>& axes, T eps = T(1e-8)) {
  if (a.shape() != b.shape()) throw DimensionError("cosine_similarity", a.shape(), b.shape());
  const Shape& s = a.shape();
  Shape out_shape = s;
  for (auto ax : axes) {
    if (ax >= s.size()) throw DimensionError("cosine_similarity: axis out of range for " + shape_str(s));
    out_shape[ax] = 1;
  }
  auto group = std::make_shared<std::vector<std::uint32_t>>(detail::broadcast_index(s, out_shape));
  const std::size_t groups = numel_of(out_shape);
  auto dot = std::make_shared<std::vector<T>>(groups, T(0));
  auto na = std::make_shared<std::vector<T>>(groups, T(0));
  auto nb = std::make_shared<std::vector<T>>(groups, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const auto gi = (*group)[i];
    (*dot)[gi] += pa[i] * pb[i];
    (*na)[gi] += pa[i] * pa[i];
    (*nb)[gi] += pb[i] * pb[i];
  }
  std::vector<T> out(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    (*na)[g] = std::sqrt((*na)[g]);
    (*nb)[g] = std::sqrt((*nb)[g]);
    out[g] = (*dot)[g] / std::max((*na)[g] * (*nb)[g], eps);
  }
  return detail::make_result<T>(out_shape, std::move(out), {a, b}, [a, b, group, dot, na, nb, eps](Node<T>& self) {
    T* ga = detail::grad_of(a);
    T* gb = detail::grad_of(b);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    const T* y = self.data->data();
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const auto gi = (*group)[i];
      const T g = self.grad[gi];
      const T prod = (*na)[gi] * (*nb)[gi];
      if (prod > eps) {
        // d cos / d a = b / (|a||b|) - cos * a / |a|^2
        if (ga) ga[i] += g * (pb[i] / prod - y[gi] * pa[i] / ((*na)[gi] * (*na)[gi]));
        if (gb) gb[i] += g * (pa[i] / prod - y[gi] * pb[i] / ((*nb)[gi] * (*nb)[gi]));
      } else {
        if (ga) ga[i] += g * pb[i] / eps;
        if (gb) gb[i] += g * pa[i] / eps;
      }
    }
  });
}

}  // namespace satcap
