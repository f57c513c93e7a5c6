#pragma once

#include <cstdint>
#include <vector>

// Separable 1-D resampling spans. Each output index maps to a short run of
// source indices with normalized weights; forward applies them as gathers,
// backward as the transposed scatters.
namespace fcbfuse::kern {

template <typename T>
struct ResampleAxis {
  std::vector<int32_t> start;   // first source index per output index
  std::vector<int32_t> count;   // taps per output index
  std::vector<int32_t> offset;  // index into weights per output index
  std::vector<T> weights;
  int64_t in = 0, out = 0;

  bool identity() const { return in == out; }
};

// floor index mapping: src = floor(i * in / out)
template <typename T>
ResampleAxis<T> make_nearest_axis(int64_t in, int64_t out);

// half-pixel-centers (align_corners=false); antialias widens the triangle
// kernel by the downscale factor when shrinking
template <typename T>
ResampleAxis<T> make_bilinear_axis(int64_t in, int64_t out, bool antialias);

// adaptive average pooling windows [floor(i*in/out), ceil((i+1)*in/out))
template <typename T>
ResampleAxis<T> make_adaptive_avg_axis(int64_t in, int64_t out);

// plane [H,W] -> [axis.out, W], rows resampled along H
template <typename T>
void resample_rows(const ResampleAxis<T>& axis, const T* in, T* out, int64_t W);
template <typename T>
void resample_rows_backward(const ResampleAxis<T>& axis, const T* dout, T* din, int64_t W);

// plane [H,W] -> [H, axis.out], each row resampled along W
template <typename T>
void resample_cols(const ResampleAxis<T>& axis, const T* in, T* out, int64_t H);
template <typename T>
void resample_cols_backward(const ResampleAxis<T>& axis, const T* dout, T* din, int64_t H);

}  // namespace fcbfuse::kern
