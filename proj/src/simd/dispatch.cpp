#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "mmr/simd/kernels.hpp"

namespace mmr::simd {

#if !defined(MMR_HAVE_AVX2)
const KernelTable* avx2_kernels() { return nullptr; }
#endif
#if !defined(MMR_HAVE_NEON)
const KernelTable* neon_kernels() { return nullptr; }
#endif

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(MMR_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(MMR_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

namespace {

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar: return &scalar_kernels();
    case Isa::avx2: return avx2_kernels();
    case Isa::neon: return neon_kernels();
  }
  return nullptr;
}

const KernelTable* detect() {
  if (const char* env = std::getenv("MMR_SIMD")) {
    const std::string want(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon})
      if (want == isa_name(isa) && isa_supported(isa)) return table_for(isa);
  }
  for (Isa isa : {Isa::avx2, Isa::neon})
    if (isa_supported(isa)) return table_for(isa);
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{detect()};
  return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void force_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::invalid_argument("ISA not available: " + std::string(isa_name(isa)));
  current().store(table_for(isa), std::memory_order_release);
}

}  // namespace mmr::simd
