#include "mmr/linalg.hpp"

#include <vector>

#include "mmr/simd/kernels.hpp"

namespace mmr::linalg {
namespace {

void transpose_into(const float* src, int rows, int cols, std::vector<float>& dst) {
  dst.resize(static_cast<std::size_t>(rows) * cols);
  constexpr int kBlock = 32;
  for (int r0 = 0; r0 < rows; r0 += kBlock)
    for (int c0 = 0; c0 < cols; c0 += kBlock)
      for (int r = r0; r < rows && r < r0 + kBlock; ++r)
        for (int c = c0; c < cols && c < c0 + kBlock; ++c)
          dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

}  // namespace

template <>
void matmul<float>(int M, int N, int K, const float* A, bool trans_a, const float* B,
                   bool trans_b, float* C, bool accumulate) {
  thread_local std::vector<float> a_buf, b_buf;
  if (trans_a) {
    transpose_into(A, K, M, a_buf);
    A = a_buf.data();
  }
  if (trans_b) {
    transpose_into(B, N, K, b_buf);
    B = b_buf.data();
  }
  simd::active().gemm_nn(M, N, K, A, K, B, N, C, N, accumulate);
}

template <>
void matmul<double>(int M, int N, int K, const double* A, bool trans_a, const double* B,
                    bool trans_b, double* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    double* c = C + static_cast<std::size_t>(i) * N;
    if (!accumulate)
      for (int j = 0; j < N; ++j) c[j] = 0.0;
    for (int k = 0; k < K; ++k) {
      const double a = trans_a ? A[static_cast<std::size_t>(k) * M + i]
                               : A[static_cast<std::size_t>(i) * K + k];
      if (trans_b) {
        for (int j = 0; j < N; ++j) c[j] += a * B[static_cast<std::size_t>(j) * K + k];
      } else {
        const double* b = B + static_cast<std::size_t>(k) * N;
        for (int j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  }
}

template <>
float dot<float>(const float* x, const float* y, std::size_t n) {
  return simd::active().dot(x, y, n);
}

template <>
double dot<double>(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <>
void axpy<float>(float a, const float* x, float* y, std::size_t n) {
  simd::active().axpy(a, x, y, n);
}

template <>
void axpy<double>(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace mmr::linalg
