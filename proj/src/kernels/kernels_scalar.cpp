/*
 * Copyright 2026 The Fallscope Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Portable reference kernels. Plain loops, accumulation in T, no intrinsics.

#include <cmath>

#include "fallscope/kernels.hpp"

namespace fallscope::kernels::scalar {

template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  auto a_at = [&](int i, int p) {
    return trans_a == Trans::kNo ? a[static_cast<std::size_t>(i) * lda + p]
                                 : a[static_cast<std::size_t>(p) * lda + i];
  };
  if (trans_b == Trans::kYes) {
    // B^T rows are contiguous in k: dot-product form.
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<std::size_t>(j) * ldb;
        T sum = 0;
        for (int p = 0; p < k; ++p) sum += a_at(i, p) * brow[p];
        T& dst = c[static_cast<std::size_t>(i) * ldc + j];
        dst = beta == T(0) ? sum : dst + sum;
      }
    }
    return;
  }
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) crow[j] = 0;
    }
    for (int p = 0; p < k; ++p) {
      const T aip = a_at(i, p);
      const T* brow = b + static_cast<std::size_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants) {
  const T beta1 = static_cast<T>(constants.beta1);
  const T beta2 = static_cast<T>(constants.beta2);
  const T one_minus_beta1 = static_cast<T>(1.0 - constants.beta1);
  const T one_minus_beta2 = static_cast<T>(1.0 - constants.beta2);
  const T inv_bc1 = static_cast<T>(1.0 / (1.0 - std::pow(constants.beta1, constants.step)));
  const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(constants.beta2, constants.step)));
  const T lr = static_cast<T>(constants.learning_rate);
  const T eps = static_cast<T>(constants.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    const T m = beta1 * first_moment[i] + one_minus_beta1 * g;
    const T v = beta2 * second_moment[i] + one_minus_beta2 * (g * g);
    first_moment[i] = m;
    second_moment[i] = v;
    const T m_hat = m * inv_bc1;
    const T v_hat = v * inv_bc2;
    params[i] = params[i] - lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template void Gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float,
                          float*, int);
template void Gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double, double*, int);
template void AdamStep<float>(std::span<float>, std::span<const float>, std::span<float>,
                              std::span<float>, const AdamConstants&);
template void AdamStep<double>(std::span<double>, std::span<const double>, std::span<double>,
                               std::span<double>, const AdamConstants&);

}  // namespace fallscope::kernels::scalar
