#include <arm_neon.h>

#include <algorithm>

#include "mmr/simd/kernels.hpp"

namespace mmr::simd {
namespace {

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B,
             int ldb, float* C, int ldc, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    float* c = C + static_cast<std::ptrdiff_t>(i) * ldc;
    if (!accumulate) std::fill_n(c, N, 0.0f);
    const float* a = A + static_cast<std::ptrdiff_t>(i) * lda;
    for (int k = 0; k < K; ++k) {
      const float32x4_t av = vdupq_n_f32(a[k]);
      const float* b = B + static_cast<std::ptrdiff_t>(k) * ldb;
      int j = 0;
      for (; j + 4 <= N; j += 4) vst1q_f32(c + j, vfmaq_f32(vld1q_f32(c + j), av, vld1q_f32(b + j)));
      for (; j < N; ++j) c[j] += a[k] * b[j];
    }
  }
}

float dot(const float* x, const float* y, std::size_t n) {
  float32x4_t s = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) s = vfmaq_f32(s, vld1q_f32(x + i), vld1q_f32(y + i));
  float r = vaddvq_f32(s);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  const float32x4_t av = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), av, vld1q_f32(x + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable* neon_kernels() {
  static const KernelTable table{Isa::neon, &gemm_nn, &dot, &axpy};
  return &table;
}

}  // namespace mmr::simd
