#include "fcbfuse/conv.hpp"

#include <algorithm>
#include <cstring>

#include "fcbfuse/kernels.hpp"

namespace fcbfuse::kern {

namespace {

// vertical/horizontal reach of the tap offsets in position-index units
template <typename D>
int64_t tap_margin(const D& d) {
  int64_t mv = std::max(d.ph, d.kh - 1 - d.ph);
  int64_t mh = std::max(d.pw, d.kw - 1 - d.pw);
  return mv * d.W + mh;
}

// stride-1 wraps corrupt the first pw and last kw-1-pw columns of each row
inline bool is_border_col(int64_t x, int64_t W, int64_t pw, int64_t kw) {
  return x < pw || x >= W - (kw - 1 - pw);
}

template <typename T>
void fill_bias_rows(T* rows, const T* bias, int64_t count, int64_t C) {
  if (bias) {
    for (int64_t r = 0; r < count; ++r) std::memcpy(rows + r * C, bias, sizeof(T) * C);
  } else {
    std::fill(rows, rows + count * C, T(0));
  }
}

// ---- stride-1 tap path -----------------------------------------------------

template <typename T>
void prepare_xpad(const ConvDims& d, const T* x, uint64_t x_version, ConvScratch<T>& s) {
  int64_t margin = tap_margin(d);
  int64_t hw = d.H * d.W;
  int64_t rows = hw + 2 * margin;
  size_t need = static_cast<size_t>(d.N) * rows * d.Cin;
  if (s.xpack.size() == need && s.x_version == x_version) return;
  s.xpack.resize(need);
  for (int64_t n = 0; n < d.N; ++n) {
    T* base = s.xpack.data() + n * rows * d.Cin;
    std::fill(base, base + margin * d.Cin, T(0));
    std::fill(base + (margin + hw) * d.Cin, base + rows * d.Cin, T(0));
    transpose(x + n * d.Cin * hw, base + margin * d.Cin, d.Cin, hw);
  }
  s.x_version = x_version;
}

template <typename T>
void prepare_wt_taps(const ConvDims& d, const T* w, uint64_t w_version, ConvScratch<T>& s) {
  int64_t taps = d.kh * d.kw;
  size_t need = static_cast<size_t>(taps) * d.Cin * d.Cout;
  if (s.wt.size() == need && s.w_version == w_version) return;
  s.wt.resize(need);
  for (int64_t t = 0; t < taps; ++t)
    for (int64_t ci = 0; ci < d.Cin; ++ci)
      for (int64_t co = 0; co < d.Cout; ++co)
        s.wt[(t * d.Cin + ci) * d.Cout + co] = w[(co * d.Cin + ci) * taps + t];
  s.w_version = w_version;
}

template <typename T>
void prepare_wt_back(const ConvDims& d, const T* w, uint64_t w_version, ConvScratch<T>& s) {
  int64_t taps = d.kh * d.kw;
  size_t need = static_cast<size_t>(taps) * d.Cout * d.Cin;
  if (s.wt_back.size() == need && s.wb_version == w_version) return;
  s.wt_back.resize(need);
  for (int64_t t = 0; t < taps; ++t)
    for (int64_t co = 0; co < d.Cout; ++co)
      for (int64_t ci = 0; ci < d.Cin; ++ci)
        s.wt_back[(t * d.Cout + co) * d.Cin + ci] = w[(co * d.Cin + ci) * taps + t];
  s.wb_version = w_version;
}

template <typename T>
void conv_s1_forward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                     const T* bias, T* out, ConvScratch<T>& s) {
  int64_t hw = d.H * d.W;
  int64_t margin = tap_margin(d);
  int64_t rows = hw + 2 * margin;
  prepare_xpad(d, x, xv, s);
  prepare_wt_taps(d, w, wv, s);
  s.pos_a.resize(hw * d.Cout);
  bool has_border = d.kw > 1;
  for (int64_t n = 0; n < d.N; ++n) {
    const T* xpad = s.xpack.data() + n * rows * d.Cin;
    T* op = s.pos_a.data();
    fill_bias_rows(op, bias, hw, d.Cout);
    for (int64_t ky = 0; ky < d.kh; ++ky)
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        int64_t t = ky * d.kw + kx;
        int64_t delta = (ky - d.ph) * d.W + (kx - d.pw);
        gemm_nn(xpad + (margin + delta) * d.Cin, s.wt.data() + t * d.Cin * d.Cout, op, hw,
                d.Cin, d.Cout);
      }
    if (has_border) {
      const T* xpos = xpad + margin * d.Cin;
      for (int64_t y = 0; y < d.H; ++y)
        for (int64_t xq = 0; xq < d.W; ++xq) {
          if (!is_border_col(xq, d.W, d.pw, d.kw)) continue;
          T* row = op + (y * d.W + xq) * d.Cout;
          if (bias)
            std::memcpy(row, bias, sizeof(T) * d.Cout);
          else
            std::fill(row, row + d.Cout, T(0));
          for (int64_t ky = 0; ky < d.kh; ++ky) {
            int64_t iy = y + ky - d.ph;
            if (iy < 0 || iy >= d.H) continue;
            for (int64_t kx = 0; kx < d.kw; ++kx) {
              int64_t ix = xq + kx - d.pw;
              if (ix < 0 || ix >= d.W) continue;
              const T* xrow = xpos + (iy * d.W + ix) * d.Cin;
              const T* wt = s.wt.data() + (ky * d.kw + kx) * d.Cin * d.Cout;
              for (int64_t ci = 0; ci < d.Cin; ++ci)
                axpy(xrow[ci], wt + ci * d.Cout, row, d.Cout);
            }
          }
        }
    }
    transpose(op, out + n * d.Cout * hw, hw, d.Cout);
  }
}

template <typename T>
void conv_s1_backward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                      const T* dout, T* dx, T* dw, T* db, ConvScratch<T>& s) {
  int64_t hw = d.H * d.W;
  int64_t margin = tap_margin(d);
  int64_t rows = hw + 2 * margin;
  int64_t taps = d.kh * d.kw;
  prepare_xpad(d, x, xv, s);
  if (dx) prepare_wt_back(d, w, wv, s);
  bool has_border = d.kw > 1;

  s.pos_a.resize(hw * d.Cout);                       // doutpos
  std::vector<T>& doutz = s.pos_b;                   // border rows zeroed
  std::vector<T> dxpad;                              // padded dx, position-major
  std::vector<T> dwt;                                // taps x Cin x Cout
  if (dw) dwt.assign(taps * d.Cin * d.Cout, T(0));
  if (dx) dxpad.resize(rows * d.Cin);

  for (int64_t n = 0; n < d.N; ++n) {
    const T* xpad = s.xpack.data() + n * rows * d.Cin;
    const T* xpos = xpad + margin * d.Cin;
    T* dop = s.pos_a.data();
    transpose(dout + n * d.Cout * hw, dop, d.Cout, hw);

    const T* dopz = dop;
    if (has_border) {
      doutz.assign(dop, dop + hw * d.Cout);
      for (int64_t y = 0; y < d.H; ++y)
        for (int64_t xq = 0; xq < d.W; ++xq)
          if (is_border_col(xq, d.W, d.pw, d.kw))
            std::fill(doutz.begin() + (y * d.W + xq) * d.Cout,
                      doutz.begin() + (y * d.W + xq + 1) * d.Cout, T(0));
      dopz = doutz.data();
    }

    if (db) {
      for (int64_t q = 0; q < hw; ++q) {
        const T* row = dop + q * d.Cout;
        for (int64_t co = 0; co < d.Cout; ++co) db[co] += row[co];
      }
    }

    if (dx) {
      std::fill(dxpad.begin(), dxpad.end(), T(0));
      for (int64_t ky = 0; ky < d.kh; ++ky)
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          int64_t t = ky * d.kw + kx;
          int64_t delta = (ky - d.ph) * d.W + (kx - d.pw);
          gemm_nn(dopz, s.wt_back.data() + t * d.Cout * d.Cin,
                  dxpad.data() + (margin + delta) * d.Cin, hw, d.Cout, d.Cin);
        }
      if (has_border) {
        for (int64_t y = 0; y < d.H; ++y)
          for (int64_t xq = 0; xq < d.W; ++xq) {
            if (!is_border_col(xq, d.W, d.pw, d.kw)) continue;
            const T* drow = dop + (y * d.W + xq) * d.Cout;
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = y + ky - d.ph;
              if (iy < 0 || iy >= d.H) continue;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = xq + kx - d.pw;
                if (ix < 0 || ix >= d.W) continue;
                T* dxrow = dxpad.data() + (margin + iy * d.W + ix) * d.Cin;
                const T* wb = s.wt_back.data() + (ky * d.kw + kx) * d.Cout * d.Cin;
                for (int64_t co = 0; co < d.Cout; ++co)
                  axpy(drow[co], wb + co * d.Cin, dxrow, d.Cin);
              }
            }
          }
      }
      transpose_add(dxpad.data() + margin * d.Cin, dx + n * d.Cin * hw, hw, d.Cin);
    }

    if (dw) {
      for (int64_t ky = 0; ky < d.kh; ++ky)
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          int64_t t = ky * d.kw + kx;
          int64_t delta = (ky - d.ph) * d.W + (kx - d.pw);
          gemm_tn(xpad + (margin + delta) * d.Cin, dopz, dwt.data() + t * d.Cin * d.Cout, hw,
                  d.Cin, d.Cout);
        }
      if (has_border) {
        for (int64_t y = 0; y < d.H; ++y)
          for (int64_t xq = 0; xq < d.W; ++xq) {
            if (!is_border_col(xq, d.W, d.pw, d.kw)) continue;
            const T* drow = dop + (y * d.W + xq) * d.Cout;
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = y + ky - d.ph;
              if (iy < 0 || iy >= d.H) continue;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = xq + kx - d.pw;
                if (ix < 0 || ix >= d.W) continue;
                const T* xrow = xpos + (iy * d.W + ix) * d.Cin;
                T* dwtt = dwt.data() + (ky * d.kw + kx) * d.Cin * d.Cout;
                for (int64_t ci = 0; ci < d.Cin; ++ci)
                  axpy(xrow[ci], drow, dwtt + ci * d.Cout, d.Cout);
              }
            }
          }
      }
    }
  }

  if (dw) {
    for (int64_t t = 0; t < taps; ++t)
      for (int64_t ci = 0; ci < d.Cin; ++ci)
        for (int64_t co = 0; co < d.Cout; ++co)
          dw[(co * d.Cin + ci) * taps + t] += dwt[(t * d.Cin + ci) * d.Cout + co];
  }
}

// ---- strided path: patch-major im2col --------------------------------------

template <typename T>
void build_col(const ConvDims& d, const T* xs, T* col) {
  int64_t K = d.Cin * d.kh * d.kw;
  int64_t hw = d.H * d.W;
  for (int64_t oy = 0; oy < d.OH; ++oy)
    for (int64_t ox = 0; ox < d.OW; ++ox) {
      T* crow = col + (oy * d.OW + ox) * K;
      int64_t iy0 = oy * d.sh - d.ph;
      int64_t ix0 = ox * d.sw - d.pw;
      for (int64_t ci = 0; ci < d.Cin; ++ci) {
        const T* plane = xs + ci * hw;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          int64_t iy = iy0 + ky;
          T* dst = crow + (ci * d.kh + ky) * d.kw;
          if (iy < 0 || iy >= d.H) {
            std::fill(dst, dst + d.kw, T(0));
            continue;
          }
          if (ix0 >= 0 && ix0 + d.kw <= d.W) {
            std::memcpy(dst, plane + iy * d.W + ix0, sizeof(T) * d.kw);
          } else {
            for (int64_t kx = 0; kx < d.kw; ++kx) {
              int64_t ix = ix0 + kx;
              dst[kx] = (ix >= 0 && ix < d.W) ? plane[iy * d.W + ix] : T(0);
            }
          }
        }
      }
    }
}

template <typename T>
void conv_strided_forward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                          const T* bias, T* out, ConvScratch<T>& s) {
  int64_t K = d.Cin * d.kh * d.kw;
  int64_t op = d.OH * d.OW;
  size_t col_need = static_cast<size_t>(d.N) * op * K;
  if (s.xpack.size() != col_need || s.x_version != xv) {
    s.xpack.resize(col_need);
    for (int64_t n = 0; n < d.N; ++n)
      build_col(d, x + n * d.Cin * d.H * d.W, s.xpack.data() + n * op * K);
    s.x_version = xv;
  }
  if (s.wt.size() != static_cast<size_t>(K) * d.Cout || s.w_version != wv) {
    s.wt.resize(K * d.Cout);
    transpose(w, s.wt.data(), d.Cout, K);
    s.w_version = wv;
  }
  s.pos_a.resize(op * d.Cout);
  for (int64_t n = 0; n < d.N; ++n) {
    T* o = s.pos_a.data();
    fill_bias_rows(o, bias, op, d.Cout);
    gemm_nn(s.xpack.data() + n * op * K, s.wt.data(), o, op, K, d.Cout);
    transpose(o, out + n * d.Cout * op, op, d.Cout);
  }
}

template <typename T>
void conv_strided_backward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                           const T* dout, T* dx, T* dw, T* db, ConvScratch<T>& s) {
  int64_t K = d.Cin * d.kh * d.kw;
  int64_t op = d.OH * d.OW;
  int64_t hw = d.H * d.W;
  // reuse the forward col cache when the input is unchanged
  size_t col_need = static_cast<size_t>(d.N) * op * K;
  if (s.xpack.size() != col_need || s.x_version != xv) {
    s.xpack.resize(col_need);
    for (int64_t n = 0; n < d.N; ++n) build_col(d, x + n * d.Cin * hw, s.xpack.data() + n * op * K);
    s.x_version = xv;
  }
  s.pos_a.resize(op * d.Cout);
  std::vector<T> dcol;
  std::vector<T> dwt;
  if (dx) dcol.resize(op * K);
  if (dw) dwt.assign(K * d.Cout, T(0));

  for (int64_t n = 0; n < d.N; ++n) {
    T* dop = s.pos_a.data();
    transpose(dout + n * d.Cout * op, dop, d.Cout, op);
    if (db) {
      for (int64_t q = 0; q < op; ++q)
        for (int64_t co = 0; co < d.Cout; ++co) db[co] += dop[q * d.Cout + co];
    }
    if (dw) gemm_tn(s.xpack.data() + n * op * K, dop, dwt.data(), op, K, d.Cout);
    if (dx) {
      std::fill(dcol.begin(), dcol.end(), T(0));
      gemm_nn(dop, w, dcol.data(), op, d.Cout, K);
      // col2im scatter
      T* dxs = dx + n * d.Cin * hw;
      for (int64_t oy = 0; oy < d.OH; ++oy)
        for (int64_t ox = 0; ox < d.OW; ++ox) {
          const T* crow = dcol.data() + (oy * d.OW + ox) * K;
          int64_t iy0 = oy * d.sh - d.ph;
          int64_t ix0 = ox * d.sw - d.pw;
          for (int64_t ci = 0; ci < d.Cin; ++ci)
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= d.H) continue;
              const T* src = crow + (ci * d.kh + ky) * d.kw;
              T* drow = dxs + ci * hw + iy * d.W;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = ix0 + kx;
                if (ix >= 0 && ix < d.W) drow[ix] += src[kx];
              }
            }
        }
    }
  }
  if (dw) transpose_add(dwt.data(), dw, K, d.Cout);
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                    const T* bias, T* out, ConvScratch<T>& s) {
  if (d.sh == 1 && d.sw == 1)
    conv_s1_forward(d, x, xv, w, wv, bias, out, s);
  else
    conv_strided_forward(d, x, xv, w, wv, bias, out, s);
}

template <typename T>
void conv2d_backward(const ConvDims& d, const T* x, uint64_t xv, const T* w, uint64_t wv,
                     const T* dout, T* dx, T* dw, T* db, ConvScratch<T>& s) {
  if (d.sh == 1 && d.sw == 1)
    conv_s1_backward(d, x, xv, w, wv, dout, dx, dw, db, s);
  else
    conv_strided_backward(d, x, xv, w, wv, dout, dx, dw, db, s);
}

template <typename T>
void depthwise_forward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       const T* x, const T* w, const T* bias, T* out) {
  int64_t ph = kh / 2, pw = kw / 2, hw = H * W;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* plane = x + (n * C + c) * hw;
      const T* wc = w + c * kh * kw;
      T* o = out + (n * C + c) * hw;
      T b = bias ? bias[c] : T(0);
      std::fill(o, o + hw, b);
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          T wv = wc[ky * kw + kx];
          int64_t dy = ky - ph, dx_ = kx - pw;
          int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(H, H - dy);
          int64_t x0 = std::max<int64_t>(0, -dx_), x1 = std::min(W, W - dx_);
          for (int64_t y = y0; y < y1; ++y)
            axpy(wv, plane + (y + dy) * W + x0 + dx_, o + y * W + x0, x1 - x0);
        }
    }
}

template <typename T>
void depthwise_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                        const T* x, const T* w, const T* dout, T* dx, T* dw, T* db) {
  int64_t ph = kh / 2, pw = kw / 2, hw = H * W;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* plane = x + (n * C + c) * hw;
      const T* dop = dout + (n * C + c) * hw;
      const T* wc = w + c * kh * kw;
      if (db) {
        T s = 0;
        for (int64_t i = 0; i < hw; ++i) s += dop[i];
        db[c] += s;
      }
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          int64_t dy = ky - ph, dx_ = kx - pw;
          int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(H, H - dy);
          int64_t x0 = std::max<int64_t>(0, -dx_), x1 = std::min(W, W - dx_);
          if (dx) {
            T wv = wc[ky * kw + kx];
            T* dplane = dx + (n * C + c) * hw;
            for (int64_t y = y0; y < y1; ++y)
              axpy(wv, dop + y * W + x0, dplane + (y + dy) * W + x0 + dx_, x1 - x0);
          }
          if (dw) {
            T acc = 0;
            for (int64_t y = y0; y < y1; ++y)
              acc += dot(plane + (y + dy) * W + x0 + dx_, dop + y * W + x0, x1 - x0);
            dw[c * kh * kw + ky * kw + kx] += acc;
          }
        }
    }
}

template void conv2d_forward<float>(const ConvDims&, const float*, uint64_t, const float*,
                                    uint64_t, const float*, float*, ConvScratch<float>&);
template void conv2d_forward<double>(const ConvDims&, const double*, uint64_t, const double*,
                                     uint64_t, const double*, double*, ConvScratch<double>&);
template void conv2d_backward<float>(const ConvDims&, const float*, uint64_t, const float*,
                                     uint64_t, const float*, float*, float*, float*,
                                     ConvScratch<float>&);
template void conv2d_backward<double>(const ConvDims&, const double*, uint64_t, const double*,
                                      uint64_t, const double*, double*, double*, double*,
                                      ConvScratch<double>&);
template void depthwise_forward<float>(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                                       const float*, const float*, const float*, float*);
template void depthwise_forward<double>(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                                        const double*, const double*, const double*, double*);
template void depthwise_backward<float>(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                                        const float*, const float*, const float*, float*, float*,
                                        float*);
template void depthwise_backward<double>(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                                         const double*, const double*, const double*, double*,
                                         double*, double*);

}  // namespace fcbfuse::kern
