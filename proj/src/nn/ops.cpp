// src/nn/ops.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ser/nn/ops.hpp"

#include <Eigen/Core>

#include <algorithm>

namespace ser::nn {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using ConstMap = Eigen::Map<const RowMat, 0, Stride>;
  ConstMap A(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
  ConstMap B(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
  Eigen::Map<RowMat, 0, Stride> C(c, m, n, Stride(ldc));
  if (beta == T(0)) {
    C.setZero();
  } else if (beta != T(1)) {
    C *= beta;
  }
  if (!trans_a && !trans_b) C.noalias() += alpha * A * B;
  else if (!trans_a) C.noalias() += alpha * A * B.transpose();
  else if (!trans_b) C.noalias() += alpha * A.transpose() * B;
  else C.noalias() += alpha * A.transpose() * B.transpose();
}

template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, int stride, int pad, int oy0,
            int oy1, int ow, T* col) {
  const std::size_t out_plane = static_cast<std::size_t>(oy1 - oy0) * ow;
  for (int ch = 0; ch < channels; ++ch) {
    const T* plane = x + static_cast<std::size_t>(ch) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* dst = col + (static_cast<std::size_t>(ch * k + ki) * k + kj) * out_plane;
        // Output columns whose input column falls inside [0, w).
        const int ox_lo = std::max(0, (pad - kj + stride - 1) / stride);
        const int last = w - 1 + pad - kj;
        const int ox_hi = last < 0 ? 0 : std::min(ow, last / stride + 1);
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ki;
          T* row = dst + static_cast<std::size_t>(oy - oy0) * ow;
          if (iy < 0 || iy >= h || ox_lo >= ox_hi) {
            std::fill(row, row + ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          std::fill(row, row + ox_lo, T(0));
          if (stride == 1) {
            std::copy(src + ox_lo - pad + kj, src + ox_hi - pad + kj, row + ox_lo);
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) row[ox] = src[ox * stride - pad + kj];
          }
          std::fill(row + ox_hi, row + ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int h, int w, int k, int stride, int pad,
                int oy0, int oy1, int ow, T* dx) {
  const std::size_t out_plane = static_cast<std::size_t>(oy1 - oy0) * ow;
  for (int ch = 0; ch < channels; ++ch) {
    T* plane = dx + static_cast<std::size_t>(ch) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* src = col + (static_cast<std::size_t>(ch * k + ki) * k + kj) * out_plane;
        const int ox_lo = std::max(0, (pad - kj + stride - 1) / stride);
        const int last = w - 1 + pad - kj;
        const int ox_hi = last < 0 ? 0 : std::min(ow, last / stride + 1);
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const T* row = src + static_cast<std::size_t>(oy - oy0) * ow;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int shift = kj - pad;
            for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox + shift] += row[ox];
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox * stride - pad + kj] += row[ox];
          }
        }
      }
    }
  }
}

#define SER_INSTANTIATE_OPS(T)                                                      \
  template void gemm<T>(bool, bool, int, int, int, T, const T*, int, const T*, int, T, T*, \
                        int);                                                        \
  template void im2col<T>(const T*, int, int, int, int, int, int, int, int, int, T*); \
  template void col2im_add<T>(const T*, int, int, int, int, int, int, int, int, int, T*);

SER_INSTANTIATE_OPS(float)
SER_INSTANTIATE_OPS(double)

#undef SER_INSTANTIATE_OPS

}  // namespace ser::nn
