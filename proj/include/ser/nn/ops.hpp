// ser/nn/ops.hpp

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

#ifndef SER_NN_OPS_HPP_
#define SER_NN_OPS_HPP_

#include <cmath>

namespace ser::nn {

// Row-major C[m x n] = alpha * op(A) * op(B) + beta * C, op(A) is m x k.
// lda, ldb and ldc are the row strides of the stored matrices.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

// Densely stored operands.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          const T* b, T beta, T* c) {
  gemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

// col[(ch*k + ki)*k + kj][(oy - oy0)*ow + ox] =
//     x[ch][oy*stride - pad + ki][ox*stride - pad + kj]   for oy in [oy0, oy1)
template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, int stride, int pad, int oy0,
            int oy1, int ow, T* col);

// Adjoint of im2col over the same output rows, accumulated into dx.
template <typename T>
void col2im_add(const T* col, int channels, int h, int w, int k, int stride, int pad,
                int oy0, int oy1, int ow, T* dx);

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace ser::nn

#endif  // SER_NN_OPS_HPP_
