#pragma once

#include <cstdint>

// Low-level dense kernels. All matrices are row-major and contiguous.
// Every kernel accumulates or writes in a fixed element order, so results
// are bit-reproducible across runs.
namespace fcbfuse::kern {

// y[i] = exp(x[i]); polynomial implementation, |rel err| < 4 ulp, input
// clamped to the representable range (saturates instead of producing inf
// for moderate overshoot, callers clamp where saturation matters).
template <typename T>
void vexp(const T* x, T* y, int64_t n);

template <typename T>
void vsigmoid(const T* x, T* y, int64_t n);

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N);

// C[M,N] += A[M,P] * B[N,P]^T   (row-by-row dot products)
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t P);

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N);

// dst[c, r] = src[r, c]
template <typename T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols);

// dst[c, r] += src[r, c]
template <typename T>
void transpose_add(const T* src, T* dst, int64_t rows, int64_t cols);

template <typename T>
void axpy(T a, const T* x, T* y, int64_t n);  // y += a * x

template <typename T>
T dot(const T* x, const T* y, int64_t n);

}  // namespace fcbfuse::kern
