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

// Dense arithmetic kernels behind the VAE: a packed GEMM and the Adam update.
//
// Every kernel has a portable scalar reference in `kernels::scalar` and an
// AVX2+FMA variant in `kernels::avx2`. The unqualified entry points dispatch
// to the best variant the host supports; the choice can be pinned with
// SetIsa() or the FALLSCOPE_ISA environment variable ("scalar" / "avx2").
// Variants agree to rounding (GEMM) or bit-exactly (Adam), and each variant
// is deterministic on its own.

#pragma once

#include <cstddef>
#include <span>

namespace fallscope::kernels {

enum class Isa { kScalar, kAvx2 };

const char* IsaName(Isa isa);
bool IsaSupported(Isa isa);
Isa ActiveIsa();
// Throws ContractError if the host cannot run `isa`.
void SetIsa(Isa isa);

enum class Trans { kNo, kYes };

struct AdamConstants {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 1;  // 1-based, for bias correction
};

// Row-major C[m x n] = beta * C + op(A)[m x k] * op(B)[k x n].
// op(A) is A (m x k, leading dim lda) or A^T (A stored k x m). Same for B.
// beta must be 0 or 1; with beta == 0, C is write-only.
template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

// One bias-corrected Adam update over a flat parameter block.
template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants);

namespace scalar {
template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);
template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants);
}  // namespace scalar

namespace avx2 {
template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);
template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants);
}  // namespace avx2

}  // namespace fallscope::kernels
