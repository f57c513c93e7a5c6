#include "fcbfuse/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace fcbfuse::kern {

// ---------------------------------------------------------------------------
// vectorized exp
//
// exp(x) = 2^n * exp(r), n = round(x / ln2), r = x - n*ln2 (split constant),
// exp(r) by minimax polynomial on [-ln2/2, ln2/2]. Branch-free so the
// compiler can vectorize the loop body.
// ---------------------------------------------------------------------------

static inline double exp_scalar(double x) {
  // clamp: exp(-746) underflows to 0, exp(710) overflows; saturate instead
  x = std::min(709.0, std::max(-709.0, x));
  const double log2e = 1.4426950408889634074;
  const double ln2_hi = 6.93145751953125e-1;
  const double ln2_lo = 1.42860682030941723212e-6;
  // round-to-nearest via the 2^52 magic constant (|t| < 2^31 here)
  double t = x * log2e;
  double magic = 6755399441055744.0;  // 1.5 * 2^52
  double nd = (t + magic) - magic;
  double r = x - nd * ln2_hi;
  r -= nd * ln2_lo;
  // degree-11 Taylor-like minimax for exp(r), r in [-0.347, 0.347]
  double p = 2.5022322536502990E-08;
  p = p * r + 2.7630903488173108E-07;
  p = p * r + 2.7557514545882439E-06;
  p = p * r + 2.4801491039099165E-05;
  p = p * r + 1.9841269589115497E-04;
  p = p * r + 1.3888888945916380E-03;
  p = p * r + 8.3333333334550432E-03;
  p = p * r + 4.1666666666519754E-02;
  p = p * r + 1.6666666666666477E-01;
  p = p * r + 5.0000000000000122E-01;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // scale by 2^n through the exponent bits
  int64_t n = static_cast<int64_t>(nd);
  uint64_t bits;
  double two_n;
  bits = static_cast<uint64_t>(n + 1023) << 52;
  std::memcpy(&two_n, &bits, sizeof(bits));
  return p * two_n;
}

static inline float exp_scalar(float x) {
  x = std::min(88.0f, std::max(-88.0f, x));
  const float log2e = 1.442695041f;
  const float ln2_hi = 0.693359375f;
  const float ln2_lo = -2.12194440e-4f;
  float t = x * log2e;
  float magic = 12582912.0f;  // 1.5 * 2^23
  float nf = (t + magic) - magic;
  float r = x - nf * ln2_hi;
  r -= nf * ln2_lo;
  float p = 1.9875691500E-4f;
  p = p * r + 1.3981999507E-3f;
  p = p * r + 8.3334519073E-3f;
  p = p * r + 4.1665795894E-2f;
  p = p * r + 1.6666665459E-1f;
  p = p * r + 5.0000001201E-1f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  int32_t n = static_cast<int32_t>(nf);
  uint32_t bits = static_cast<uint32_t>(n + 127) << 23;
  float two_n;
  std::memcpy(&two_n, &bits, sizeof(bits));
  return p * two_n;
}

template <typename T>
void vexp(const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = exp_scalar(x[i]);
}

template <typename T>
void vsigmoid(const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + exp_scalar(-x[i]));
}

template void vexp<float>(const float*, float*, int64_t);
template void vexp<double>(const double*, double*, int64_t);
template void vsigmoid<float>(const float*, float*, int64_t);
template void vsigmoid<double>(const double*, double*, int64_t);

// ---------------------------------------------------------------------------
// gemm_nn: C += A*B. AVX-512 micro-kernel (6 rows x 4 vectors) with generic
// tails; plain axpy fallback elsewhere.
// ---------------------------------------------------------------------------

template <typename T>
static void gemm_nn_generic(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t m = 0; m < M; ++m) {
    T* c = C + m * N;
    const T* arow = A + m * K;
    for (int64_t k = 0; k < K; ++k) {
      T a = arow[k];
      const T* b = B + k * N;
      for (int64_t n = 0; n < N; ++n) c[n] += a * b[n];
    }
  }
}

#if defined(__AVX512F__)

static void gemm_nn_f64(const double* A, const double* B, double* C, int64_t M, int64_t K,
                        int64_t N) {
  constexpr int64_t MR = 6, NR = 32;
  int64_t n0 = 0;
  for (; n0 + NR <= N; n0 += NR) {
    int64_t m0 = 0;
    for (; m0 + MR <= M; m0 += MR) {
      __m512d acc[MR][4];
      for (int i = 0; i < MR; ++i)
        for (int j = 0; j < 4; ++j) acc[i][j] = _mm512_setzero_pd();
      for (int64_t k = 0; k < K; ++k) {
        const double* b = B + k * N + n0;
        __m512d b0 = _mm512_loadu_pd(b);
        __m512d b1 = _mm512_loadu_pd(b + 8);
        __m512d b2 = _mm512_loadu_pd(b + 16);
        __m512d b3 = _mm512_loadu_pd(b + 24);
        for (int i = 0; i < MR; ++i) {
          __m512d a = _mm512_set1_pd(A[(m0 + i) * K + k]);
          acc[i][0] = _mm512_fmadd_pd(a, b0, acc[i][0]);
          acc[i][1] = _mm512_fmadd_pd(a, b1, acc[i][1]);
          acc[i][2] = _mm512_fmadd_pd(a, b2, acc[i][2]);
          acc[i][3] = _mm512_fmadd_pd(a, b3, acc[i][3]);
        }
      }
      for (int i = 0; i < MR; ++i) {
        double* c = C + (m0 + i) * N + n0;
        _mm512_storeu_pd(c, _mm512_add_pd(_mm512_loadu_pd(c), acc[i][0]));
        _mm512_storeu_pd(c + 8, _mm512_add_pd(_mm512_loadu_pd(c + 8), acc[i][1]));
        _mm512_storeu_pd(c + 16, _mm512_add_pd(_mm512_loadu_pd(c + 16), acc[i][2]));
        _mm512_storeu_pd(c + 24, _mm512_add_pd(_mm512_loadu_pd(c + 24), acc[i][3]));
      }
    }
    for (; m0 < M; ++m0) {
      const double* arow = A + m0 * K;
      double* c = C + m0 * N + n0;
      __m512d a0 = _mm512_setzero_pd(), a1 = a0, a2 = a0, a3 = a0;
      for (int64_t k = 0; k < K; ++k) {
        const double* b = B + k * N + n0;
        __m512d a = _mm512_set1_pd(arow[k]);
        a0 = _mm512_fmadd_pd(a, _mm512_loadu_pd(b), a0);
        a1 = _mm512_fmadd_pd(a, _mm512_loadu_pd(b + 8), a1);
        a2 = _mm512_fmadd_pd(a, _mm512_loadu_pd(b + 16), a2);
        a3 = _mm512_fmadd_pd(a, _mm512_loadu_pd(b + 24), a3);
      }
      _mm512_storeu_pd(c, _mm512_add_pd(_mm512_loadu_pd(c), a0));
      _mm512_storeu_pd(c + 8, _mm512_add_pd(_mm512_loadu_pd(c + 8), a1));
      _mm512_storeu_pd(c + 16, _mm512_add_pd(_mm512_loadu_pd(c + 16), a2));
      _mm512_storeu_pd(c + 24, _mm512_add_pd(_mm512_loadu_pd(c + 24), a3));
    }
  }
  if (int64_t rem = N - n0; rem > 0) {
    for (int64_t m = 0; m < M; ++m) {
      const double* arow = A + m * K;
      double* c = C + m * N + n0;
      for (int64_t k = 0; k < K; ++k) {
        double a = arow[k];
        const double* b = B + k * N + n0;
        for (int64_t n = 0; n < rem; ++n) c[n] += a * b[n];
      }
    }
  }
}

static void gemm_nn_f32(const float* A, const float* B, float* C, int64_t M, int64_t K,
                        int64_t N) {
  constexpr int64_t MR = 6, NR = 64;
  int64_t n0 = 0;
  for (; n0 + NR <= N; n0 += NR) {
    int64_t m0 = 0;
    for (; m0 + MR <= M; m0 += MR) {
      __m512 acc[MR][4];
      for (int i = 0; i < MR; ++i)
        for (int j = 0; j < 4; ++j) acc[i][j] = _mm512_setzero_ps();
      for (int64_t k = 0; k < K; ++k) {
        const float* b = B + k * N + n0;
        __m512 b0 = _mm512_loadu_ps(b);
        __m512 b1 = _mm512_loadu_ps(b + 16);
        __m512 b2 = _mm512_loadu_ps(b + 32);
        __m512 b3 = _mm512_loadu_ps(b + 48);
        for (int i = 0; i < MR; ++i) {
          __m512 a = _mm512_set1_ps(A[(m0 + i) * K + k]);
          acc[i][0] = _mm512_fmadd_ps(a, b0, acc[i][0]);
          acc[i][1] = _mm512_fmadd_ps(a, b1, acc[i][1]);
          acc[i][2] = _mm512_fmadd_ps(a, b2, acc[i][2]);
          acc[i][3] = _mm512_fmadd_ps(a, b3, acc[i][3]);
        }
      }
      for (int i = 0; i < MR; ++i) {
        float* c = C + (m0 + i) * N + n0;
        _mm512_storeu_ps(c, _mm512_add_ps(_mm512_loadu_ps(c), acc[i][0]));
        _mm512_storeu_ps(c + 16, _mm512_add_ps(_mm512_loadu_ps(c + 16), acc[i][1]));
        _mm512_storeu_ps(c + 32, _mm512_add_ps(_mm512_loadu_ps(c + 32), acc[i][2]));
        _mm512_storeu_ps(c + 48, _mm512_add_ps(_mm512_loadu_ps(c + 48), acc[i][3]));
      }
    }
    for (; m0 < M; ++m0) {
      const float* arow = A + m0 * K;
      float* c = C + m0 * N + n0;
      __m512 a0 = _mm512_setzero_ps(), a1 = a0, a2 = a0, a3 = a0;
      for (int64_t k = 0; k < K; ++k) {
        const float* b = B + k * N + n0;
        __m512 a = _mm512_set1_ps(arow[k]);
        a0 = _mm512_fmadd_ps(a, _mm512_loadu_ps(b), a0);
        a1 = _mm512_fmadd_ps(a, _mm512_loadu_ps(b + 16), a1);
        a2 = _mm512_fmadd_ps(a, _mm512_loadu_ps(b + 32), a2);
        a3 = _mm512_fmadd_ps(a, _mm512_loadu_ps(b + 48), a3);
      }
      _mm512_storeu_ps(c, _mm512_add_ps(_mm512_loadu_ps(c), a0));
      _mm512_storeu_ps(c + 16, _mm512_add_ps(_mm512_loadu_ps(c + 16), a1));
      _mm512_storeu_ps(c + 32, _mm512_add_ps(_mm512_loadu_ps(c + 32), a2));
      _mm512_storeu_ps(c + 48, _mm512_add_ps(_mm512_loadu_ps(c + 48), a3));
    }
  }
  if (int64_t rem = N - n0; rem > 0) {
    for (int64_t m = 0; m < M; ++m) {
      const float* arow = A + m * K;
      float* c = C + m * N + n0;
      for (int64_t k = 0; k < K; ++k) {
        float a = arow[k];
        const float* b = B + k * N + n0;
        for (int64_t n = 0; n < rem; ++n) c[n] += a * b[n];
      }
    }
  }
}

#endif  // __AVX512F__

template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  if (N == 1) {  // matvec: dot per row
    for (int64_t m = 0; m < M; ++m) {
      T s = 0;
      const T* arow = A + m * K;
      for (int64_t k = 0; k < K; ++k) s += arow[k] * B[k];
      C[m] += s;
    }
    return;
  }
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<T, double>) {
    if (N >= 32) {
      gemm_nn_f64(A, B, C, M, K, N);
      return;
    }
  } else if constexpr (std::is_same_v<T, float>) {
    if (N >= 64) {
      gemm_nn_f32(A, B, C, M, K, N);
      return;
    }
  }
#endif
  gemm_nn_generic(A, B, C, M, K, N);
}

template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t P) {
  for (int64_t m = 0; m < M; ++m) {
    const T* arow = A + m * P;
    T* c = C + m * N;
    for (int64_t n = 0; n < N; ++n) c[n] += dot(arow, B + n * P, P);
  }
}

template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  // k-strip blocking keeps the C strip hot while streaming A and B rows
  constexpr int64_t KB = 64;
  for (int64_t k0 = 0; k0 < K; k0 += KB) {
    int64_t kend = std::min(k0 + KB, K);
    for (int64_t m = 0; m < M; ++m) {
      const T* arow = A + m * K;
      const T* brow = B + m * N;
      for (int64_t k = k0; k < kend; ++k) axpy(arow[k], brow, C + k * N, N);
    }
  }
}

template <typename T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols) {
  constexpr int64_t BL = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += BL)
    for (int64_t c0 = 0; c0 < cols; c0 += BL) {
      int64_t r1 = std::min(r0 + BL, rows), c1 = std::min(c0 + BL, cols);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

template <typename T>
void transpose_add(const T* src, T* dst, int64_t rows, int64_t cols) {
  constexpr int64_t BL = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += BL)
    for (int64_t c0 = 0; c0 < cols; c0 += BL) {
      int64_t r1 = std::min(r0 + BL, rows), c1 = std::min(c0 + BL, cols);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] += src[r * cols + c];
    }
}

template <typename T>
void axpy(T a, const T* x, T* y, int64_t n) {
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<T, double>) {
    __m512d av = _mm512_set1_pd(a);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
      _mm512_storeu_pd(y + i, _mm512_fmadd_pd(av, _mm512_loadu_pd(x + i), _mm512_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
    return;
  } else if constexpr (std::is_same_v<T, float>) {
    __m512 av = _mm512_set1_ps(a);
    int64_t i = 0;
    for (; i + 16 <= n; i += 16)
      _mm512_storeu_ps(y + i, _mm512_fmadd_ps(av, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
T dot(const T* x, const T* y, int64_t n) {
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<T, double>) {
    __m512d acc = _mm512_setzero_pd();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
      acc = _mm512_fmadd_pd(_mm512_loadu_pd(x + i), _mm512_loadu_pd(y + i), acc);
    double s = _mm512_reduce_add_pd(acc);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
  } else if constexpr (std::is_same_v<T, float>) {
    __m512 acc = _mm512_setzero_ps();
    int64_t i = 0;
    for (; i + 16 <= n; i += 16)
      acc = _mm512_fmadd_ps(_mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i), acc);
    float s = _mm512_reduce_add_ps(acc);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
  }
#endif
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void transpose<float>(const float*, float*, int64_t, int64_t);
template void transpose<double>(const double*, double*, int64_t, int64_t);
template void transpose_add<float>(const float*, float*, int64_t, int64_t);
template void transpose_add<double>(const double*, double*, int64_t, int64_t);
template void axpy<float>(float, const float*, float*, int64_t);
template void axpy<double>(double, const double*, double*, int64_t);
template float dot<float>(const float*, const float*, int64_t);
template double dot<double>(const double*, const double*, int64_t);

}  // namespace fcbfuse::kern
