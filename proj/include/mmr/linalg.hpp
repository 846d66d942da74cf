#pragma once

#include <cstddef>

namespace mmr::linalg {

// Dense row-major products on contiguous operands.
// A is M x K (or K x M when trans_a), B is K x N (or N x K when trans_b),
// C is M x N. With accumulate the product is added to C.
// float routes through the runtime-selected SIMD kernel; double uses the
// scalar reference loops (it only backs verification paths).
template <class T>
void matmul(int M, int N, int K, const T* A, bool trans_a, const T* B, bool trans_b, T* C,
            bool accumulate);

template <class T>
T dot(const T* x, const T* y, std::size_t n);

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n);

}  // namespace mmr::linalg
