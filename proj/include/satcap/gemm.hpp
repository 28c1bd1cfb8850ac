#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace satcap::detail {

// C[m,n] (+)= op(A) * op(B) over row-major buffers. A is stored k×m when
// trans_a is set (m×k otherwise); likewise B is n×k when trans_b is set.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> cm(c, em, en);
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  CMap am(a, trans_a ? ek : em, trans_a ? em : ek);
  CMap bm(b, trans_b ? en : ek, trans_b ? ek : en);
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

}  // namespace satcap::detail
