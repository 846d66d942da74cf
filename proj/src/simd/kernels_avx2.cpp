// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "mmr/simd/kernels.hpp"

namespace mmr::simd {
namespace {

constexpr int kPanel = 16;

inline __m256i lane_mask(int count) {
  alignas(32) static const int kTable[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                             0,  0,  0,  0,  0,  0,  0,  0};
  count = std::clamp(count, 0, 8);
  return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(kTable + 8 - count));
}

template <int Rows>
inline void micro_kernel(int K, const float* A, int lda, const float* panel,
                         float* C, int ldc, int nb, bool accumulate) {
  __m256 acc[Rows][2];
  const __m256i m0 = lane_mask(nb);
  const __m256i m1 = lane_mask(nb - 8);
  for (int r = 0; r < Rows; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_maskload_ps(C + r * ldc, m0);
      acc[r][1] = _mm256_maskload_ps(C + r * ldc + 8, m1);
    } else {
      acc[r][0] = _mm256_setzero_ps();
      acc[r][1] = _mm256_setzero_ps();
    }
  }
  for (int k = 0; k < K; ++k) {
    const __m256 b0 = _mm256_loadu_ps(panel + k * kPanel);
    const __m256 b1 = _mm256_loadu_ps(panel + k * kPanel + 8);
    for (int r = 0; r < Rows; ++r) {
      const __m256 a = _mm256_broadcast_ss(A + static_cast<std::ptrdiff_t>(r) * lda + k);
      acc[r][0] = _mm256_fmadd_ps(a, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(a, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < Rows; ++r) {
    if (nb == kPanel) {
      _mm256_storeu_ps(C + r * ldc, acc[r][0]);
      _mm256_storeu_ps(C + r * ldc + 8, acc[r][1]);
    } else {
      _mm256_maskstore_ps(C + r * ldc, m0, acc[r][0]);
      _mm256_maskstore_ps(C + r * ldc + 8, m1, acc[r][1]);
    }
  }
}

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B,
             int ldb, float* C, int ldc, bool accumulate) {
  if (M <= 0 || N <= 0) return;
  if (K <= 0) {
    if (!accumulate)
      for (int i = 0; i < M; ++i) std::fill_n(C + static_cast<std::ptrdiff_t>(i) * ldc, N, 0.0f);
    return;
  }
  thread_local std::vector<float> panel;
  panel.resize(static_cast<std::size_t>(K) * kPanel);
  for (int jb = 0; jb < N; jb += kPanel) {
    const int nb = std::min(kPanel, N - jb);
    for (int k = 0; k < K; ++k) {
      const float* src = B + static_cast<std::ptrdiff_t>(k) * ldb + jb;
      float* dst = panel.data() + static_cast<std::ptrdiff_t>(k) * kPanel;
      int j = 0;
      for (; j < nb; ++j) dst[j] = src[j];
      for (; j < kPanel; ++j) dst[j] = 0.0f;
    }
    int i = 0;
    for (; i + 4 <= M; i += 4)
      micro_kernel<4>(K, A + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(),
                      C + static_cast<std::ptrdiff_t>(i) * ldc + jb, ldc, nb, accumulate);
    for (; i < M; ++i)
      micro_kernel<1>(K, A + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(),
                      C + static_cast<std::ptrdiff_t>(i) * ldc + jb, ldc, nb, accumulate);
  }
}

inline float hsum(__m256 v) {
  __m128 lo = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x1));
  return _mm_cvtss_f32(lo);
}

float dot(const float* x, const float* y, std::size_t n) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8)
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
  float s = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::avx2, &gemm_nn, &dot, &axpy};
  return &table;
}

}  // namespace mmr::simd
