#pragma once

#include <cstddef>
#include <string_view>

namespace mmr::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

// Row-major single-precision kernels. Every ISA variant must agree with the
// scalar reference up to floating-point reassociation.
struct KernelTable {
  Isa isa;
  // C[M x N] (+)= A[M x K] * B[K x N]
  void (*gemm_nn)(int M, int N, int K, const float* A, int lda, const float* B,
                  int ldb, float* C, int ldc, bool accumulate);
  float (*dot)(const float* x, const float* y, std::size_t n);
  // y += a * x
  void (*axpy)(float a, const float* x, float* y, std::size_t n);
};

const KernelTable& scalar_kernels();
// Returns nullptr when the variant is not compiled into this binary.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

bool isa_supported(Isa isa);

// The table used by the library. Chosen once from CPU features; the
// MMR_SIMD environment variable (scalar|avx2|neon) overrides the choice.
const KernelTable& active();
// Throws std::invalid_argument when the ISA is unavailable on this machine.
void force_isa(Isa isa);

}  // namespace mmr::simd
