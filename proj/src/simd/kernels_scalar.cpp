#include "mmr/simd/kernels.hpp"

namespace mmr::simd {
namespace {

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B,
             int ldb, float* C, int ldc, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    float* c = C + static_cast<std::ptrdiff_t>(i) * ldc;
    if (!accumulate)
      for (int j = 0; j < N; ++j) c[j] = 0.0f;
    const float* a = A + static_cast<std::ptrdiff_t>(i) * lda;
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      const float* b = B + static_cast<std::ptrdiff_t>(k) * ldb;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

float dot(const float* x, const float* y, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, &gemm_nn, &dot, &axpy};
  return table;
}

}  // namespace mmr::simd
