#pragma once

#include <cstdint>
#include <vector>

// Raw convolution kernels on NCHW buffers. Stride-1 convolutions run as one
// GEMM per kernel tap over a zero-padded position-major copy of the input
// (out-of-row wraps are fixed up exactly afterwards); strided convolutions
// go through a patch-major im2col. Scratch buffers are cached per node and
// keyed by input/weight versions so repeated re-evaluation of an unchanged
// operand skips the packing passes.
namespace fcbfuse::kern {

struct ConvDims {
  int64_t N, Cin, H, W;
  int64_t Cout, kh, kw;
  int64_t sh, sw, ph, pw;
  int64_t OH, OW;
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
struct ConvScratch {
  std::vector<T> xpack;    // stride-1: padded position-major input; strided: im2col
  std::vector<T> wt;       // taps x Cin x Cout (stride-1) or K x Cout (strided)
  std::vector<T> wt_back;  // taps x Cout x Cin, built for backward-input
  std::vector<T> pos_a, pos_b;  // position-major staging for out / dout
  uint64_t x_version = ~0ull;
  uint64_t w_version = ~0ull;
  uint64_t wb_version = ~0ull;
};

template <typename T>
void conv2d_forward(const ConvDims& d, const T* x, uint64_t x_version, const T* w,
                    uint64_t w_version, const T* bias, T* out, ConvScratch<T>& s);

// Accumulates into any non-null gradient buffer.
template <typename T>
void conv2d_backward(const ConvDims& d, const T* x, uint64_t x_version, const T* w,
                     uint64_t w_version, const T* dout, T* dx, T* dw, T* db,
                     ConvScratch<T>& s);

// Depthwise conv, weight [C,1,kh,kw], stride 1, pad kh/2 x kw/2.
template <typename T>
void depthwise_forward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       const T* x, const T* w, const T* bias, T* out);

template <typename T>
void depthwise_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                        const T* x, const T* w, const T* dout, T* dx, T* dw, T* db);

}  // namespace fcbfuse::kern
