#include "fcbfuse/resample.hpp"

#include <algorithm>
#include <cmath>

#include "fcbfuse/kernels.hpp"

namespace fcbfuse::kern {

template <typename T>
ResampleAxis<T> make_nearest_axis(int64_t in, int64_t out) {
  ResampleAxis<T> a;
  a.in = in;
  a.out = out;
  a.start.resize(out);
  a.count.assign(out, 1);
  a.offset.resize(out);
  a.weights.assign(out, T(1));
  for (int64_t i = 0; i < out; ++i) {
    int64_t src = i * in / out;
    a.start[i] = static_cast<int32_t>(std::min(src, in - 1));
    a.offset[i] = static_cast<int32_t>(i);
  }
  return a;
}

template <typename T>
ResampleAxis<T> make_bilinear_axis(int64_t in, int64_t out, bool antialias) {
  ResampleAxis<T> a;
  a.in = in;
  a.out = out;
  a.start.resize(out);
  a.count.resize(out);
  a.offset.resize(out);
  double scale = static_cast<double>(in) / static_cast<double>(out);
  bool shrink = antialias && scale > 1.0;
  double support = shrink ? scale : 1.0;
  for (int64_t i = 0; i < out; ++i) {
    double center = (i + 0.5) * scale - 0.5;
    a.offset[i] = static_cast<int32_t>(a.weights.size());
    if (!shrink) {
      double cl = std::min(std::max(center, 0.0), static_cast<double>(in - 1));
      int64_t x0 = static_cast<int64_t>(std::floor(cl));
      double f = cl - x0;
      if (f == 0.0 || x0 + 1 >= in) {
        a.start[i] = static_cast<int32_t>(x0);
        a.count[i] = 1;
        a.weights.push_back(T(1));
      } else {
        a.start[i] = static_cast<int32_t>(x0);
        a.count[i] = 2;
        a.weights.push_back(static_cast<T>(1.0 - f));
        a.weights.push_back(static_cast<T>(f));
      }
    } else {
      int64_t lo = static_cast<int64_t>(std::ceil(center - support));
      int64_t hi = static_cast<int64_t>(std::floor(center + support));
      lo = std::max<int64_t>(lo, 0);
      hi = std::min(hi, in - 1);
      double sum = 0.0;
      std::vector<double> w;
      for (int64_t j = lo; j <= hi; ++j) {
        double d = std::abs(j - center) / support;
        double v = d < 1.0 ? 1.0 - d : 0.0;
        w.push_back(v);
        sum += v;
      }
      a.start[i] = static_cast<int32_t>(lo);
      a.count[i] = static_cast<int32_t>(w.size());
      for (double v : w) a.weights.push_back(static_cast<T>(v / sum));
    }
  }
  return a;
}

template <typename T>
ResampleAxis<T> make_adaptive_avg_axis(int64_t in, int64_t out) {
  ResampleAxis<T> a;
  a.in = in;
  a.out = out;
  a.start.resize(out);
  a.count.resize(out);
  a.offset.resize(out);
  for (int64_t i = 0; i < out; ++i) {
    int64_t lo = i * in / out;
    int64_t hi = ((i + 1) * in + out - 1) / out;
    a.start[i] = static_cast<int32_t>(lo);
    a.count[i] = static_cast<int32_t>(hi - lo);
    a.offset[i] = static_cast<int32_t>(a.weights.size());
    for (int64_t j = lo; j < hi; ++j) a.weights.push_back(T(1) / static_cast<T>(hi - lo));
  }
  return a;
}

template <typename T>
void resample_rows(const ResampleAxis<T>& axis, const T* in, T* out, int64_t W) {
  for (int64_t oy = 0; oy < axis.out; ++oy) {
    T* orow = out + oy * W;
    std::fill(orow, orow + W, T(0));
    const T* w = axis.weights.data() + axis.offset[oy];
    for (int32_t t = 0; t < axis.count[oy]; ++t)
      axpy(w[t], in + (axis.start[oy] + t) * W, orow, W);
  }
}

template <typename T>
void resample_rows_backward(const ResampleAxis<T>& axis, const T* dout, T* din, int64_t W) {
  for (int64_t oy = 0; oy < axis.out; ++oy) {
    const T* drow = dout + oy * W;
    const T* w = axis.weights.data() + axis.offset[oy];
    for (int32_t t = 0; t < axis.count[oy]; ++t)
      axpy(w[t], drow, din + (axis.start[oy] + t) * W, W);
  }
}

template <typename T>
void resample_cols(const ResampleAxis<T>& axis, const T* in, T* out, int64_t H) {
  for (int64_t y = 0; y < H; ++y) {
    const T* irow = in + y * axis.in;
    T* orow = out + y * axis.out;
    for (int64_t ox = 0; ox < axis.out; ++ox) {
      const T* w = axis.weights.data() + axis.offset[ox];
      const T* src = irow + axis.start[ox];
      T s = 0;
      for (int32_t t = 0; t < axis.count[ox]; ++t) s += w[t] * src[t];
      orow[ox] = s;
    }
  }
}

template <typename T>
void resample_cols_backward(const ResampleAxis<T>& axis, const T* dout, T* din, int64_t H) {
  for (int64_t y = 0; y < H; ++y) {
    const T* drow = dout + y * axis.out;
    T* irow = din + y * axis.in;
    for (int64_t ox = 0; ox < axis.out; ++ox) {
      const T* w = axis.weights.data() + axis.offset[ox];
      T* dst = irow + axis.start[ox];
      T g = drow[ox];
      for (int32_t t = 0; t < axis.count[ox]; ++t) dst[t] += w[t] * g;
    }
  }
}

#define INSTANTIATE(T)                                                       \
  template ResampleAxis<T> make_nearest_axis<T>(int64_t, int64_t);           \
  template ResampleAxis<T> make_bilinear_axis<T>(int64_t, int64_t, bool);    \
  template ResampleAxis<T> make_adaptive_avg_axis<T>(int64_t, int64_t);      \
  template void resample_rows<T>(const ResampleAxis<T>&, const T*, T*, int64_t);   \
  template void resample_rows_backward<T>(const ResampleAxis<T>&, const T*, T*, int64_t); \
  template void resample_cols<T>(const ResampleAxis<T>&, const T*, T*, int64_t);   \
  template void resample_cols_backward<T>(const ResampleAxis<T>&, const T*, T*, int64_t);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace fcbfuse::kern
