#include <cmath>
#include <cstring>
#include <memory>

#include "fcbfuse/conv.hpp"
#include "fcbfuse/kernels.hpp"
#include "fcbfuse/ops.hpp"
#include "fcbfuse/resample.hpp"
#include "op_common.hpp"

namespace fcbfuse {

namespace {

template <typename T>
void colsum_add(const T* m, T* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    for (int64_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

template <typename T>
struct LinearScratch {
  std::vector<T> wt;  // [In, Out]
  uint64_t w_version = ~0ull;
};

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  check(x.ndim() >= 1 && w.ndim() == 2, "linear: weight must be 2-d");
  int64_t in = x.shape().back();
  int64_t out_f = w.dim(0);
  check(w.dim(1) == in, "linear: input features " + std::to_string(in) +
                            " do not match weight " + shape_str(w.shape()));
  if (bias) check(bias->numel() == out_f, "linear: bias size mismatch");
  int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  auto xn = x.node(), wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  auto scratch = std::make_shared<LinearScratch<T>>();
  return make_node<T>(
      "linear", std::move(out_shape), bias ? std::vector<Tensor<T>>{x, w, *bias}
                                           : std::vector<Tensor<T>>{x, w},
      [xn, wn, bn, scratch, rows, in, out_f](TensorNode<T>& out) {
        if (scratch->w_version != wn->version) {
          scratch->wt.resize(in * out_f);
          kern::transpose(wn->values.data(), scratch->wt.data(), out_f, in);
          scratch->w_version = wn->version;
        }
        if (bn) {
          for (int64_t r = 0; r < rows; ++r)
            std::memcpy(out.values.data() + r * out_f, bn->values.data(), sizeof(T) * out_f);
        } else {
          std::fill(out.values.begin(), out.values.end(), T(0));
        }
        kern::gemm_nn(xn->values.data(), scratch->wt.data(), out.values.data(), rows, in, out_f);
      },
      [xn, wn, bn, rows, in, out_f](const TensorNode<T>&, const std::vector<T>& g,
                                    BackwardCtx<T>& ctx) {
        if (xn->requires_grad)
          kern::gemm_nn(g.data(), wn->values.data(), ctx.buf(xn).data(), rows, out_f, in);
        if (wn->requires_grad)
          kern::gemm_tn(g.data(), xn->values.data(), ctx.buf(wn).data(), rows, out_f, in);
        if (bn && bn->requires_grad) colsum_add(g.data(), ctx.buf(bn).data(), rows, out_f);
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 std::pair<int64_t, int64_t> stride, std::pair<int64_t, int64_t> padding) {
  check(x.ndim() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  check(w.ndim() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  kern::ConvDims d;
  d.N = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.sh = stride.first;
  d.sw = stride.second;
  d.ph = padding.first;
  d.pw = padding.second;
  check(w.dim(1) == d.Cin, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                               " input channels, input has " + std::to_string(d.Cin));
  check(d.sh >= 1 && d.sw >= 1, "conv2d: stride must be >= 1");
  check(d.ph >= 0 && d.pw >= 0, "conv2d: padding must be >= 0");
  check(d.kh <= d.H + 2 * d.ph && d.kw <= d.W + 2 * d.pw,
        "conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
            " exceeds padded input " + std::to_string(d.H + 2 * d.ph) + "x" +
            std::to_string(d.W + 2 * d.pw));
  if (bias) check(bias->numel() == d.Cout, "conv2d: bias size mismatch");
  d.OH = kern::conv_out_extent(d.H, d.kh, d.sh, d.ph);
  d.OW = kern::conv_out_extent(d.W, d.kw, d.sw, d.pw);
  check(d.OH >= 1 && d.OW >= 1, "conv2d: zero-extent output");

  auto xn = x.node(), wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  auto scratch = std::make_shared<kern::ConvScratch<T>>();
  return make_node<T>(
      "conv2d", Shape{d.N, d.Cout, d.OH, d.OW},
      bias ? std::vector<Tensor<T>>{x, w, *bias} : std::vector<Tensor<T>>{x, w},
      [xn, wn, bn, d, scratch](TensorNode<T>& out) {
        kern::conv2d_forward(d, xn->values.data(), xn->version, wn->values.data(), wn->version,
                             bn ? bn->values.data() : nullptr, out.values.data(), *scratch);
      },
      [xn, wn, bn, d, scratch](const TensorNode<T>&, const std::vector<T>& g,
                               BackwardCtx<T>& ctx) {
        T* dx = xn->requires_grad ? ctx.buf(xn).data() : nullptr;
        T* dw = wn->requires_grad ? ctx.buf(wn).data() : nullptr;
        T* db = (bn && bn->requires_grad) ? ctx.buf(bn).data() : nullptr;
        if (!dx && !dw && !db) return;
        kern::conv2d_backward(d, xn->values.data(), xn->version, wn->values.data(), wn->version,
                              g.data(), dx, dw, db, *scratch);
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  check(x.ndim() == 4 && w.ndim() == 4 && w.dim(1) == 1,
        "depthwise_conv2d: weight must be [C,1,kh,kw]");
  check(w.dim(0) == x.dim(1), "depthwise_conv2d: channel mismatch");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t kh = w.dim(2), kw = w.dim(3);
  if (bias) check(bias->numel() == C, "depthwise_conv2d: bias size mismatch");
  auto xn = x.node(), wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  return make_node<T>(
      "depthwise_conv2d", x.shape(),
      bias ? std::vector<Tensor<T>>{x, w, *bias} : std::vector<Tensor<T>>{x, w},
      [=](TensorNode<T>& out) {
        kern::depthwise_forward(N, C, H, W, kh, kw, xn->values.data(), wn->values.data(),
                                bn ? bn->values.data() : nullptr, out.values.data());
      },
      [=](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        T* dx = xn->requires_grad ? ctx.buf(xn).data() : nullptr;
        T* dw = wn->requires_grad ? ctx.buf(wn).data() : nullptr;
        T* db = (bn && bn->requires_grad) ? ctx.buf(bn).data() : nullptr;
        if (!dx && !dw && !db) return;
        kern::depthwise_backward(N, C, H, W, kh, kw, xn->values.data(), wn->values.data(),
                                 g.data(), dx, dw, db);
      });
}

namespace {

// shared normalization core: rows of length m are normalized independently;
// `cmap` maps an element offset within the row group to its affine channel
template <typename T>
struct NormStats {
  std::vector<T> mean, inv;  // per row group
};

}  // namespace

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t num_groups, T eps, const Tensor<T>& gamma,
                     const Tensor<T>& beta) {
  check(x.ndim() == 4, "group_norm: input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(num_groups >= 1 && C % num_groups == 0,
        "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
            std::to_string(num_groups));
  check(eps > T(0), "group_norm: eps must be positive");
  check(gamma.numel() == C && beta.numel() == C, "group_norm: affine params must have C elements");
  int64_t cpg = C / num_groups;
  int64_t m = cpg * hw;
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto stats = std::make_shared<NormStats<T>>();
  return make_node<T>(
      "group_norm", x.shape(), {x, gamma, beta},
      [=](TensorNode<T>& out) {
        stats->mean.resize(N * num_groups);
        stats->inv.resize(N * num_groups);
        const T* xv = xn->values.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t g = 0; g < num_groups; ++g) {
            const T* base = xv + (n * C + g * cpg) * hw;
            double s = 0, s2 = 0;
            for (int64_t i = 0; i < m; ++i) {
              double v = base[i];
              s += v;
              s2 += v * v;
            }
            double mean = s / m;
            double var = s2 / m - mean * mean;
            if (var < 0) var = 0;
            T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            stats->mean[n * num_groups + g] = static_cast<T>(mean);
            stats->inv[n * num_groups + g] = inv;
            T* o = out.values.data() + (n * C + g * cpg) * hw;
            for (int64_t c = 0; c < cpg; ++c) {
              T ga = gn->values[g * cpg + c];
              T be = bn->values[g * cpg + c];
              T a = ga * inv;
              T b = be - ga * inv * static_cast<T>(mean);
              const T* xrow = base + c * hw;
              T* orow = o + c * hw;
              for (int64_t i = 0; i < hw; ++i) orow[i] = a * xrow[i] + b;
            }
          }
      },
      [=](const TensorNode<T>&, const std::vector<T>& g_out, BackwardCtx<T>& ctx) {
        const T* xv = xn->values.data();
        std::vector<T>* dx = xn->requires_grad ? &ctx.buf(xn) : nullptr;
        std::vector<T>* dga = gn->requires_grad ? &ctx.buf(gn) : nullptr;
        std::vector<T>* dbe = bn->requires_grad ? &ctx.buf(bn) : nullptr;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t g = 0; g < num_groups; ++g) {
            T mean = stats->mean[n * num_groups + g];
            T inv = stats->inv[n * num_groups + g];
            int64_t base_off = (n * C + g * cpg) * hw;
            const T* base = xv + base_off;
            const T* grow = g_out.data() + base_off;
            // accumulate affine grads and the two reduction terms
            double s1 = 0, s2 = 0;
            for (int64_t c = 0; c < cpg; ++c) {
              T ga = gn->values[g * cpg + c];
              const T* xrow = base + c * hw;
              const T* gr = grow + c * hw;
              double dga_c = 0, dbe_c = 0;
              for (int64_t i = 0; i < hw; ++i) {
                T xhat = (xrow[i] - mean) * inv;
                T dy = gr[i] * ga;
                s1 += dy;
                s2 += static_cast<double>(dy) * xhat;
                dga_c += static_cast<double>(gr[i]) * xhat;
                dbe_c += gr[i];
              }
              if (dga) (*dga)[g * cpg + c] += static_cast<T>(dga_c);
              if (dbe) (*dbe)[g * cpg + c] += static_cast<T>(dbe_c);
            }
            if (dx) {
              T k1 = static_cast<T>(s1 / m);
              T k2 = static_cast<T>(s2 / m);
              for (int64_t c = 0; c < cpg; ++c) {
                T ga = gn->values[g * cpg + c];
                const T* xrow = base + c * hw;
                const T* gr = grow + c * hw;
                T* dxrow = dx->data() + base_off + c * hw;
                for (int64_t i = 0; i < hw; ++i) {
                  T xhat = (xrow[i] - mean) * inv;
                  T dy = gr[i] * ga;
                  dxrow[i] += inv * (dy - k1 - xhat * k2);
                }
              }
            }
          }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps, const Tensor<T>& gamma, const Tensor<T>& beta) {
  check(x.ndim() >= 1, "layer_norm: rank must be >= 1");
  check(eps > T(0), "layer_norm: eps must be positive");
  int64_t D = x.shape().back();
  check(gamma.numel() == D && beta.numel() == D,
        "layer_norm: affine params must match last dim " + std::to_string(D));
  int64_t rows = x.numel() / D;
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto stats = std::make_shared<NormStats<T>>();
  return make_node<T>(
      "layer_norm", x.shape(), {x, gamma, beta},
      [=](TensorNode<T>& out) {
        stats->mean.resize(rows);
        stats->inv.resize(rows);
        const T* xv = xn->values.data();
        const T* ga = gn->values.data();
        const T* be = bn->values.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* xrow = xv + r * D;
          double s = 0, s2 = 0;
          for (int64_t i = 0; i < D; ++i) {
            double v = xrow[i];
            s += v;
            s2 += v * v;
          }
          double mean = s / D;
          double var = s2 / D - mean * mean;
          if (var < 0) var = 0;
          T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
          stats->mean[r] = static_cast<T>(mean);
          stats->inv[r] = inv;
          T* orow = out.values.data() + r * D;
          for (int64_t i = 0; i < D; ++i)
            orow[i] = (xrow[i] - static_cast<T>(mean)) * inv * ga[i] + be[i];
        }
      },
      [=](const TensorNode<T>&, const std::vector<T>& g_out, BackwardCtx<T>& ctx) {
        const T* xv = xn->values.data();
        const T* ga = gn->values.data();
        std::vector<T>* dx = xn->requires_grad ? &ctx.buf(xn) : nullptr;
        std::vector<T>* dga = gn->requires_grad ? &ctx.buf(gn) : nullptr;
        std::vector<T>* dbe = bn->requires_grad ? &ctx.buf(bn) : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
          T mean = stats->mean[r];
          T inv = stats->inv[r];
          const T* xrow = xv + r * D;
          const T* gr = g_out.data() + r * D;
          double s1 = 0, s2 = 0;
          for (int64_t i = 0; i < D; ++i) {
            T xhat = (xrow[i] - mean) * inv;
            T dy = gr[i] * ga[i];
            s1 += dy;
            s2 += static_cast<double>(dy) * xhat;
            if (dga) (*dga)[i] += gr[i] * xhat;
            if (dbe) (*dbe)[i] += gr[i];
          }
          if (dx) {
            T k1 = static_cast<T>(s1 / D), k2 = static_cast<T>(s2 / D);
            T* dxrow = dx->data() + r * D;
            for (int64_t i = 0; i < D; ++i) {
              T xhat = (xrow[i] - mean) * inv;
              T dy = gr[i] * ga[i];
              dxrow[i] += inv * (dy - k1 - xhat * k2);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t D = x.shape().back();
  int64_t rows = x.numel() / D;
  auto xn = x.node();
  return make_node<T>(
      "softmax", x.shape(), {x},
      [xn, rows, D](TensorNode<T>& out) {
        const T* xv = xn->values.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* xrow = xv + r * D;
          T* orow = out.values.data() + r * D;
          T mx = xrow[0];
          for (int64_t i = 1; i < D; ++i) mx = std::max(mx, xrow[i]);
          for (int64_t i = 0; i < D; ++i) orow[i] = xrow[i] - mx;
          kern::vexp(orow, orow, D);
          T s = 0;
          for (int64_t i = 0; i < D; ++i) s += orow[i];
          T invs = T(1) / s;
          for (int64_t i = 0; i < D; ++i) orow[i] *= invs;
        }
      },
      [xn, rows, D](const TensorNode<T>& self, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        for (int64_t r = 0; r < rows; ++r) {
          const T* p = self.values.data() + r * D;
          const T* gr = g.data() + r * D;
          T dotv = 0;
          for (int64_t i = 0; i < D; ++i) dotv += gr[i] * p[i];
          T* dxrow = dx.data() + r * D;
          for (int64_t i = 0; i < D; ++i) dxrow[i] += p[i] * (gr[i] - dotv);
        }
      });
}

namespace {

template <typename T>
struct ResamplePlan {
  kern::ResampleAxis<T> hax, wax;
  std::vector<T> tmp;  // [OH, W] staging
};

template <typename T>
Tensor<T> apply_resample(const char* name, const Tensor<T>& x, int64_t out_h, int64_t out_w,
                         std::shared_ptr<ResamplePlan<T>> plan) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto xn = x.node();
  return make_node<T>(
      name, Shape{N, C, out_h, out_w}, {x},
      [xn, plan, N, C, H, W, out_h, out_w](TensorNode<T>& out) {
        plan->tmp.resize(out_h * W);
        for (int64_t p = 0; p < N * C; ++p) {
          const T* in_plane = xn->values.data() + p * H * W;
          T* out_plane = out.values.data() + p * out_h * out_w;
          kern::resample_rows(plan->hax, in_plane, plan->tmp.data(), W);
          kern::resample_cols(plan->wax, plan->tmp.data(), out_plane, out_h);
        }
      },
      [xn, plan, N, C, H, W, out_h, out_w](const TensorNode<T>&, const std::vector<T>& g,
                                           BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        plan->tmp.assign(out_h * W, T(0));
        for (int64_t p = 0; p < N * C; ++p) {
          std::fill(plan->tmp.begin(), plan->tmp.end(), T(0));
          kern::resample_cols_backward(plan->wax, g.data() + p * out_h * out_w,
                                       plan->tmp.data(), out_h);
          kern::resample_rows_backward(plan->hax, plan->tmp.data(), dx.data() + p * H * W, W);
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> interpolate2d(const Tensor<T>& x, int64_t out_h, int64_t out_w, InterpMode mode,
                        bool antialias) {
  check(x.ndim() == 4, "interpolate2d: input must be [N,C,H,W]");
  check(out_h >= 1 && out_w >= 1, "interpolate2d: output dims must be positive");
  check(!(antialias && mode == InterpMode::kNearest),
        "interpolate2d: antialias is only valid with bilinear mode");
  int64_t H = x.dim(2), W = x.dim(3);
  auto plan = std::make_shared<ResamplePlan<T>>();
  if (mode == InterpMode::kNearest) {
    plan->hax = kern::make_nearest_axis<T>(H, out_h);
    plan->wax = kern::make_nearest_axis<T>(W, out_w);
  } else {
    plan->hax = kern::make_bilinear_axis<T>(H, out_h, antialias);
    plan->wax = kern::make_bilinear_axis<T>(W, out_w, antialias);
  }
  return apply_resample(mode == InterpMode::kNearest ? "interp_nearest" : "interp_bilinear", x,
                        out_h, out_w, std::move(plan));
}

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  check(x.ndim() == 4, "adaptive_avg_pool2d: input must be [N,C,H,W]");
  check(out_h >= 1 && out_w >= 1, "adaptive_avg_pool2d: output dims must be positive");
  auto plan = std::make_shared<ResamplePlan<T>>();
  plan->hax = kern::make_adaptive_avg_axis<T>(x.dim(2), out_h);
  plan->wax = kern::make_adaptive_avg_axis<T>(x.dim(3), out_w);
  return apply_resample("adaptive_avg_pool", x, out_h, out_w, std::move(plan));
}

template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& t, int64_t H, int64_t W) {
  check(t.ndim() == 3, "tokens_to_spatial: input must be [N,L,D]");
  int64_t N = t.dim(0), L = t.dim(1), D = t.dim(2);
  check(L == H * W, "tokens_to_spatial: token count " + std::to_string(L) +
                        " != " + std::to_string(H) + "x" + std::to_string(W));
  auto tn = t.node();
  return make_node<T>(
      "tokens_to_spatial", Shape{N, D, H, W}, {t},
      [tn, N, L, D](TensorNode<T>& out) {
        for (int64_t n = 0; n < N; ++n)
          kern::transpose(tn->values.data() + n * L * D, out.values.data() + n * D * L, L, D);
      },
      [tn, N, L, D](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!tn->requires_grad) return;
        auto& dt = ctx.buf(tn);
        for (int64_t n = 0; n < N; ++n)
          kern::transpose_add(g.data() + n * D * L, dt.data() + n * L * D, D, L);
      });
}

template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x) {
  check(x.ndim() == 4, "spatial_to_tokens: input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  auto xn = x.node();
  return make_node<T>(
      "spatial_to_tokens", Shape{N, L, C}, {x},
      [xn, N, C, L](TensorNode<T>& out) {
        for (int64_t n = 0; n < N; ++n)
          kern::transpose(xn->values.data() + n * C * L, out.values.data() + n * L * C, C, L);
      },
      [xn, N, C, L](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        for (int64_t n = 0; n < N; ++n)
          kern::transpose_add(g.data() + n * L * C, dx.data() + n * C * L, L, C);
      });
}

template <typename T>
Tensor<T> matmul_qk(const Tensor<T>& q, const Tensor<T>& k, T scl) {
  check(q.ndim() == 3 && k.ndim() == 3, "matmul_qk: inputs must be [B,M,D]/[B,N,D]");
  check(q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2),
        "matmul_qk: batch/depth mismatch " + shape_str(q.shape()) + " vs " +
            shape_str(k.shape()));
  int64_t B = q.dim(0), M = q.dim(1), Nk = k.dim(1), D = q.dim(2);
  auto qn = q.node(), kn = k.node();
  return make_node<T>(
      "matmul_qk", Shape{B, M, Nk}, {q, k},
      [=](TensorNode<T>& out) {
        std::fill(out.values.begin(), out.values.end(), T(0));
        for (int64_t b = 0; b < B; ++b) {
          T* c = out.values.data() + b * M * Nk;
          kern::gemm_nt(qn->values.data() + b * M * D, kn->values.data() + b * Nk * D, c, M, Nk,
                        D);
        }
        for (auto& v : out.values) v *= scl;
      },
      [=](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        std::vector<T> gs(g.size());
        for (size_t i = 0; i < g.size(); ++i) gs[i] = g[i] * scl;
        if (qn->requires_grad) {
          auto& dq = ctx.buf(qn);
          for (int64_t b = 0; b < B; ++b)
            kern::gemm_nn(gs.data() + b * M * Nk, kn->values.data() + b * Nk * D,
                          dq.data() + b * M * D, M, Nk, D);
        }
        if (kn->requires_grad) {
          auto& dk = ctx.buf(kn);
          for (int64_t b = 0; b < B; ++b)
            kern::gemm_tn(gs.data() + b * M * Nk, qn->values.data() + b * M * D,
                          dk.data() + b * Nk * D, M, Nk, D);
        }
      });
}

template <typename T>
Tensor<T> matmul_pv(const Tensor<T>& p, const Tensor<T>& v) {
  check(p.ndim() == 3 && v.ndim() == 3, "matmul_pv: inputs must be [B,M,N]/[B,N,D]");
  check(p.dim(0) == v.dim(0) && p.dim(2) == v.dim(1),
        "matmul_pv: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(v.shape()));
  int64_t B = p.dim(0), M = p.dim(1), Nk = p.dim(2), D = v.dim(2);
  auto pn = p.node(), vn = v.node();
  return make_node<T>(
      "matmul_pv", Shape{B, M, D}, {p, v},
      [=](TensorNode<T>& out) {
        std::fill(out.values.begin(), out.values.end(), T(0));
        for (int64_t b = 0; b < B; ++b)
          kern::gemm_nn(pn->values.data() + b * M * Nk, vn->values.data() + b * Nk * D,
                        out.values.data() + b * M * D, M, Nk, D);
      },
      [=](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (pn->requires_grad) {
          auto& dp = ctx.buf(pn);
          for (int64_t b = 0; b < B; ++b)
            kern::gemm_nt(g.data() + b * M * D, vn->values.data() + b * Nk * D,
                          dp.data() + b * M * Nk, M, Nk, D);
        }
        if (vn->requires_grad) {
          auto& dv = ctx.buf(vn);
          for (int64_t b = 0; b < B; ++b)
            kern::gemm_tn(pn->values.data() + b * M * Nk, g.data() + b * M * D,
                          dv.data() + b * Nk * D, M, Nk, D);
        }
      });
}

#define INSTANTIATE_NN(T)                                                                     \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);         \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,          \
                               std::pair<int64_t, int64_t>, std::pair<int64_t, int64_t>);     \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                         const Tensor<T>*);                                   \
  template Tensor<T> group_norm<T>(const Tensor<T>&, int64_t, T, const Tensor<T>&,            \
                                   const Tensor<T>&);                                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, T, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> softmax_lastdim<T>(const Tensor<T>&);                                    \
  template Tensor<T> interpolate2d<T>(const Tensor<T>&, int64_t, int64_t, InterpMode, bool);  \
  template Tensor<T> adaptive_avg_pool2d<T>(const Tensor<T>&, int64_t, int64_t);              \
  template Tensor<T> tokens_to_spatial<T>(const Tensor<T>&, int64_t, int64_t);                \
  template Tensor<T> spatial_to_tokens<T>(const Tensor<T>&);                                  \
  template Tensor<T> matmul_qk<T>(const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> matmul_pv<T>(const Tensor<T>&, const Tensor<T>&);

INSTANTIATE_NN(float)
INSTANTIATE_NN(double)
#undef INSTANTIATE_NN

}  // namespace fcbfuse
