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

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "fallscope/errors.hpp"
#include "fallscope/kernels.hpp"

namespace fallscope::kernels {
namespace {

bool HostHasAvx2() {
#if defined(FALLSCOPE_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa InitialIsa() {
  if (const char* env = std::getenv("FALLSCOPE_ISA")) {
    const std::string_view want(env);
    if (want == "scalar") return Isa::kScalar;
    if (want == "avx2" && HostHasAvx2()) return Isa::kAvx2;
  }
  return HostHasAvx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& Active() {
  static std::atomic<Isa> isa{InitialIsa()};
  return isa;
}

}  // namespace

const char* IsaName(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

bool IsaSupported(Isa isa) { return isa == Isa::kScalar || HostHasAvx2(); }

Isa ActiveIsa() { return Active().load(std::memory_order_relaxed); }

void SetIsa(Isa isa) {
  if (!IsaSupported(isa)) throw ContractError(std::string("ISA not supported: ") + IsaName(isa));
  Active().store(isa, std::memory_order_relaxed);
}

template <typename T>
void Gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
#if defined(FALLSCOPE_HAVE_AVX2)
  if (ActiveIsa() == Isa::kAvx2) {
    avx2::Gemm<T>(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
    return;
  }
#endif
  scalar::Gemm<T>(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void AdamStep(std::span<T> params, std::span<const T> grads, std::span<T> first_moment,
              std::span<T> second_moment, const AdamConstants& constants) {
  if (grads.size() != params.size() || first_moment.size() != params.size() ||
      second_moment.size() != params.size()) {
    throw ContractError("AdamStep: buffer sizes differ");
  }
#if defined(FALLSCOPE_HAVE_AVX2)
  if (ActiveIsa() == Isa::kAvx2) {
    avx2::AdamStep<T>(params, grads, first_moment, second_moment, constants);
    return;
  }
#endif
  scalar::AdamStep<T>(params, grads, first_moment, second_moment, constants);
}

template void Gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float,
                          float*, int);
template void Gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double, double*, int);
template void AdamStep<float>(std::span<float>, std::span<const float>, std::span<float>,
                              std::span<float>, const AdamConstants&);
template void AdamStep<double>(std::span<double>, std::span<const double>, std::span<double>,
                               std::span<double>, const AdamConstants&);

}  // namespace fallscope::kernels
