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

// AVX2+FMA kernels. Compiled with -mavx2 -mfma; only reached through the
// runtime dispatcher after a CPUID check.
//
// The GEMM follows the usual packed layout: B is packed into NR-column
// panels per (kc x nc) block, A into MR-row panels per (mc x kc) block, and a
// register-blocked MR x NR micro-kernel accumulates over kc. Edge tiles are
// zero-padded in the packed buffers and written back through a scratch tile.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fallscope/kernels.hpp"

namespace fallscope::kernels::avx2 {
namespace {

template <typename T>
struct Simd;

template <>
struct Simd<float> {
  using Vec = __m256;
  static constexpr int kLanes = 8;
  static Vec Zero() { return _mm256_setzero_ps(); }
  static Vec Load(const float* p) { return _mm256_loadu_ps(p); }
  static void Store(float* p, Vec v) { _mm256_storeu_ps(p, v); }
  static Vec Broadcast(float x) { return _mm256_set1_ps(x); }
  static Vec Fma(Vec a, Vec b, Vec c) { return _mm256_fmadd_ps(a, b, c); }
  static Vec Add(Vec a, Vec b) { return _mm256_add_ps(a, b); }
  static Vec Sub(Vec a, Vec b) { return _mm256_sub_ps(a, b); }
  static Vec Mul(Vec a, Vec b) { return _mm256_mul_ps(a, b); }
  static Vec Div(Vec a, Vec b) { return _mm256_div_ps(a, b); }
  static Vec Sqrt(Vec a) { return _mm256_sqrt_ps(a); }
};

template <>
struct Simd<double> {
  using Vec = __m256d;
  static constexpr int kLanes = 4;
  static Vec Zero() { return _mm256_setzero_pd(); }
  static Vec Load(const double* p) { return _mm256_loadu_pd(p); }
  static void Store(double* p, Vec v) { _mm256_storeu_pd(p, v); }
  static Vec Broadcast(double x) { return _mm256_set1_pd(x); }
  static Vec Fma(Vec a, Vec b, Vec c) { return _mm256_fmadd_pd(a, b, c); }
  static Vec Add(Vec a, Vec b) { return _mm256_add_pd(a, b); }
  static Vec Sub(Vec a, Vec b) { return _mm256_sub_pd(a, b); }
  static Vec Mul(Vec a, Vec b) { return _mm256_mul_pd(a, b); }
  static Vec Div(Vec a, Vec b) { return _mm256_div_pd(a, b); }
  static Vec Sqrt(Vec a) { return _mm256_sqrt_pd(a); }
};

template <typename T>
struct Blocking {
  static constexpr int kMr = 6;
  static constexpr int kNr = 2 * Simd<T>::kLanes;
  static constexpr int kKc = 256;
  static constexpr int kMc = 72;
  static constexpr int kNc = 4096;
};

template <typename T>
struct Operand {
  const T* data;
  int ld;
  bool transposed;
  // Element (row, col) of op(X).
  T operator()(int row, int col) const {
    return transposed ? data[static_cast<std::size_t>(col) * ld + row]
                      : data[static_cast<std::size_t>(row) * ld + col];
  }
};

// Packs op(A)[i0:i0+mc, p0:p0+kc] into MR-row panels, k-major within a panel.
template <typename T>
void PackA(const Operand<T>& a, int i0, int mc, int p0, int kc, T* out) {
  constexpr int kMr = Blocking<T>::kMr;
  for (int ir = 0; ir < mc; ir += kMr) {
    const int rows = std::min(kMr, mc - ir);
    if (!a.transposed) {
      for (int r = 0; r < kMr; ++r) {
        if (r < rows) {
          const T* src = a.data + static_cast<std::size_t>(i0 + ir + r) * a.ld + p0;
          for (int p = 0; p < kc; ++p) out[p * kMr + r] = src[p];
        } else {
          for (int p = 0; p < kc; ++p) out[p * kMr + r] = T(0);
        }
      }
    } else {
      for (int p = 0; p < kc; ++p) {
        const T* src = a.data + static_cast<std::size_t>(p0 + p) * a.ld + i0 + ir;
        int r = 0;
        for (; r < rows; ++r) out[p * kMr + r] = src[r];
        for (; r < kMr; ++r) out[p * kMr + r] = T(0);
      }
    }
    out += static_cast<std::size_t>(kMr) * kc;
  }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into NR-column panels, k-major within a panel.
template <typename T>
void PackB(const Operand<T>& b, int p0, int kc, int j0, int nc, T* out) {
  constexpr int kNr = Blocking<T>::kNr;
  for (int jr = 0; jr < nc; jr += kNr) {
    const int cols = std::min(kNr, nc - jr);
    if (!b.transposed) {
      for (int p = 0; p < kc; ++p) {
        const T* src = b.data + static_cast<std::size_t>(p0 + p) * b.ld + j0 + jr;
        int j = 0;
        for (; j < cols; ++j) out[p * kNr + j] = src[j];
        for (; j < kNr; ++j) out[p * kNr + j] = T(0);
      }
    } else {
      for (int j = 0; j < kNr; ++j) {
        if (j < cols) {
          const T* src = b.data + static_cast<std::size_t>(j0 + jr + j) * b.ld + p0;
          for (int p = 0; p < kc; ++p) out[p * kNr + j] = src[p];
        } else {
          for (int p = 0; p < kc; ++p) out[p * kNr + j] = T(0);
        }
      }
    }
    out += static_cast<std::size_t>(kNr) * kc;
  }
}

// C[MR x NR] (+)= Apanel * Bpanel. `overwrite` stores instead of accumulating.
template <typename T>
inline void MicroKernel(int kc, const T* __restrict ap, const T* __restrict bp, T* c, int ldc,
                        bool overwrite) {
  using S = Simd<T>;
  constexpr int kMr = Blocking<T>::kMr;
  constexpr int kL = S::kLanes;
  typename S::Vec c00 = S::Zero(), c01 = S::Zero(), c10 = S::Zero(), c11 = S::Zero(),
                  c20 = S::Zero(), c21 = S::Zero(), c30 = S::Zero(), c31 = S::Zero(),
                  c40 = S::Zero(), c41 = S::Zero(), c50 = S::Zero(), c51 = S::Zero();
  for (int p = 0; p < kc; ++p) {
    const auto b0 = S::Load(bp);
    const auto b1 = S::Load(bp + kL);
    auto a = S::Broadcast(ap[0]);
    c00 = S::Fma(a, b0, c00);
    c01 = S::Fma(a, b1, c01);
    a = S::Broadcast(ap[1]);
    c10 = S::Fma(a, b0, c10);
    c11 = S::Fma(a, b1, c11);
    a = S::Broadcast(ap[2]);
    c20 = S::Fma(a, b0, c20);
    c21 = S::Fma(a, b1, c21);
    a = S::Broadcast(ap[3]);
    c30 = S::Fma(a, b0, c30);
    c31 = S::Fma(a, b1, c31);
    a = S::Broadcast(ap[4]);
    c40 = S::Fma(a, b0, c40);
    c41 = S::Fma(a, b1, c41);
    a = S::Broadcast(ap[5]);
    c50 = S::Fma(a, b0, c50);
    c51 = S::Fma(a, b1, c51);
    ap += kMr;
    bp += 2 * kL;
  }
  const typename S::Vec acc[kMr][2] = {{c00, c01}, {c10, c11}, {c20, c21},
                                       {c30, c31}, {c40, c41}, {c50, c51}};
  for (int r = 0; r < kMr; ++r) {
    T* row = c + static_cast<std::size_t>(r) * ldc;
    if (overwrite) {
      S::Store(row, acc[r][0]);
      S::Store(row + kL, acc[r][1]);
    } else {
      S::Store(row, S::Add(S::Load(row), acc[r][0]));
      S::Store(row + kL, S::Add(S::Load(row + kL), acc[r][1]));
    }
  }
}

template <typename T>
void GemmImpl(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
              int ldb, T beta, T* c, int ldc) {
  using B = Blocking<T>;
  constexpr int kMr = B::kMr;
  constexpr int kNr = B::kNr;
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (beta == T(0)) {
      for (int i = 0; i < m; ++i) std::fill_n(c + static_cast<std::size_t>(i) * ldc, n, T(0));
    }
    return;
  }
  const Operand<T> op_a{a, lda, trans_a == Trans::kYes};
  const Operand<T> op_b{b, ldb, trans_b == Trans::kYes};

  thread_local std::vector<T> packed_a;
  thread_local std::vector<T> packed_b;
  packed_a.resize(static_cast<std::size_t>(B::kMc + kMr) * B::kKc);
  packed_b.resize(static_cast<std::size_t>(B::kNc + kNr) * B::kKc);
  alignas(32) T tile[kMr * kNr];

  for (int jc = 0; jc < n; jc += B::kNc) {
    const int nc = std::min(B::kNc, n - jc);
    for (int pc = 0; pc < k; pc += B::kKc) {
      const int kc = std::min(B::kKc, k - pc);
      const bool overwrite = pc == 0 && beta == T(0);
      PackB(op_b, pc, kc, jc, nc, packed_b.data());
      for (int ic = 0; ic < m; ic += B::kMc) {
        const int mc = std::min(B::kMc, m - ic);
        PackA(op_a, ic, mc, pc, kc, packed_a.data());
        for (int jr = 0; jr < nc; jr += kNr) {
          const int cols = std::min(kNr, nc - jr);
          const T* bp = packed_b.data() + static_cast<std::size_t>(jr / kNr) * kNr * kc;
          for (int ir = 0; ir < mc; ir += kMr) {
            const int rows = std::min(kMr, mc - ir);
            const T* ap = packed_a.data() + static_cast<std::size_t>(ir / kMr) * kMr * kc;
            T* cblock = c + static_cast<std::size_t>(ic + ir) * ldc + jc + jr;
            if (rows == kMr && cols == kNr) {
              MicroKernel(kc, ap, bp, cblock, ldc, overwrite);
              continue;
            }
            MicroKernel(kc, ap, bp, tile, kNr, true);
            for (int r = 0; r < rows; ++r) {
              T* dst = cblock + static_cast<std::size_t>(r) * ldc;
              const T* src = tile + r * kNr;
              if (overwrite) {
                std::copy_n(src, cols, dst);
              } else {
                for (int j = 0; j < cols; ++j) dst[j] += src[j];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void AdamImpl(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants) {
  using S = Simd<T>;
  // Same operation order as the scalar reference, no fused multiply-add:
  // results match it bit for bit.
  const T beta1 = static_cast<T>(constants.beta1);
  const T beta2 = static_cast<T>(constants.beta2);
  const T one_minus_beta1 = static_cast<T>(1.0 - constants.beta1);
  const T one_minus_beta2 = static_cast<T>(1.0 - constants.beta2);
  const T inv_bc1 = static_cast<T>(1.0 / (1.0 - std::pow(constants.beta1, constants.step)));
  const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(constants.beta2, constants.step)));
  const T lr = static_cast<T>(constants.learning_rate);
  const T eps = static_cast<T>(constants.eps);
  const auto vb1 = S::Broadcast(beta1), vb2 = S::Broadcast(beta2);
  const auto vomb1 = S::Broadcast(one_minus_beta1), vomb2 = S::Broadcast(one_minus_beta2);
  const auto vbc1 = S::Broadcast(inv_bc1), vbc2 = S::Broadcast(inv_bc2);
  const auto vlr = S::Broadcast(lr), veps = S::Broadcast(eps);
  const std::size_t n = params.size();
  std::size_t i = 0;
  for (; i + S::kLanes <= n; i += S::kLanes) {
    const auto g = S::Load(grads.data() + i);
    const auto m = S::Add(S::Mul(vb1, S::Load(first_moment.data() + i)), S::Mul(vomb1, g));
    const auto v =
        S::Add(S::Mul(vb2, S::Load(second_moment.data() + i)), S::Mul(vomb2, S::Mul(g, g)));
    S::Store(first_moment.data() + i, m);
    S::Store(second_moment.data() + i, v);
    const auto m_hat = S::Mul(m, vbc1);
    const auto v_hat = S::Mul(v, vbc2);
    const auto step = S::Div(S::Mul(vlr, m_hat), S::Add(S::Sqrt(v_hat), veps));
    S::Store(params.data() + i, S::Sub(S::Load(params.data() + i), step));
  }
  for (; i < n; ++i) {
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

}  // namespace

template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  GemmImpl<T>(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants) {
  AdamImpl<T>(params, grads, first_moment, second_moment, constants);
}

template void Gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float,
                          float*, int);
template void Gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double, double*, int);
template void AdamStep<float>(std::span<float>, std::span<const float>, std::span<float>,
                              std::span<float>, const AdamConstants&);
template void AdamStep<double>(std::span<double>, std::span<const double>, std::span<double>,
                               std::span<double>, const AdamConstants&);

}  // namespace fallscope::kernels::avx2
