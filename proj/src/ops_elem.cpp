#include <cmath>
#include <cstring>
#include <memory>

#include "fcbfuse/kernels.hpp"
#include "fcbfuse/ops.hpp"
#include "op_common.hpp"

namespace fcbfuse {

namespace {

template <typename T>
void accum(std::vector<T>& dst, const T* src, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
void accum_range(std::vector<T>& dst, int64_t at, const T* src, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[at + i] += src[i];
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(),
        "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  return make_node<T>(
      "add", a.shape(), {a, b},
      [an, bn](TensorNode<T>& out) {
        const auto& av = an->values;
        const auto& bv = bn->values;
        for (size_t i = 0; i < av.size(); ++i) out.values[i] = av[i] + bv[i];
      },
      [an, bn](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (an->requires_grad) accum(ctx.buf(an), g.data(), g.size());
        if (bn->requires_grad) accum(ctx.buf(bn), g.data(), g.size());
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(),
        "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  return make_node<T>(
      "mul", a.shape(), {a, b},
      [an, bn](TensorNode<T>& out) {
        const auto& av = an->values;
        const auto& bv = bn->values;
        for (size_t i = 0; i < av.size(); ++i) out.values[i] = av[i] * bv[i];
      },
      [an, bn](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (an->requires_grad) {
          auto& da = ctx.buf(an);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bn->values[i];
        }
        if (bn->requires_grad) {
          auto& db = ctx.buf(bn);
          for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * an->values[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto an = a.node();
  return make_node<T>(
      "scale", a.shape(), {a},
      [an, s](TensorNode<T>& out) {
        for (size_t i = 0; i < an->values.size(); ++i) out.values[i] = an->values[i] * s;
      },
      [an, s](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!an->requires_grad) return;
        auto& da = ctx.buf(an);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  auto xn = x.node();
  auto sig = std::make_shared<std::vector<T>>();
  return make_node<T>(
      "silu", x.shape(), {x},
      [xn, sig](TensorNode<T>& out) {
        size_t n = xn->values.size();
        sig->resize(n);
        kern::vsigmoid(xn->values.data(), sig->data(), static_cast<int64_t>(n));
        for (size_t i = 0; i < n; ++i) out.values[i] = xn->values[i] * (*sig)[i];
      },
      [xn, sig](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        const auto& xv = xn->values;
        for (size_t i = 0; i < g.size(); ++i) {
          T s = (*sig)[i];
          dx[i] += g[i] * (s + xv[i] * s * (T(1) - s));
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto xn = x.node();
  return make_node<T>(
      "sigmoid", x.shape(), {x},
      [xn](TensorNode<T>& out) {
        kern::vsigmoid(xn->values.data(), out.values.data(),
                       static_cast<int64_t>(xn->values.size()));
      },
      [xn](const TensorNode<T>& self, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        for (size_t i = 0; i < g.size(); ++i) {
          T s = self.values[i];
          dx[i] += g[i] * s * (T(1) - s);
        }
      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto xn = x.node();
  return make_node<T>(
      "sum", Shape{1}, {x},
      [xn](TensorNode<T>& out) {
        T s = 0;
        for (T v : xn->values) s += v;
        out.values[0] = s;
      },
      [xn](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.buf(xn);
        for (auto& v : dx) v += g[0];
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  check(numel(s) == x.numel(),
        "reshape: " + shape_str(x.shape()) + " to incompatible " + shape_str(s));
  auto xn = x.node();
  return make_node<T>(
      "reshape", std::move(s), {x},
      [xn](TensorNode<T>& out) {
        std::memcpy(out.values.data(), xn->values.data(), sizeof(T) * xn->values.size());
      },
      [xn](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        accum(ctx.buf(xn), g.data(), g.size());
      });
}

namespace {

// dst[out index] = src[in index], out dims = in dims permuted by axes
template <typename T>
void permute_raw(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& axes,
                 bool accumulate) {
  size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[axes[i]];
  std::vector<int64_t> in_strides(nd, 1), out_idx(nd, 0);
  for (size_t i = nd - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  int64_t total = numel(in_shape);
  int64_t src_off = 0;
  // iterate output in row-major order; track matching source offset
  std::vector<int64_t> stride_for_out(nd);
  for (size_t i = 0; i < nd; ++i) stride_for_out[i] = in_strides[axes[i]];
  for (int64_t o = 0; o < total; ++o) {
    if (accumulate)
      dst[o] += src[src_off];
    else
      dst[o] = src[src_off];
    for (int64_t i = static_cast<int64_t>(nd) - 1; i >= 0; --i) {
      src_off += stride_for_out[i];
      if (++out_idx[i] < out_shape[i]) break;
      src_off -= stride_for_out[i] * out_shape[i];
      out_idx[i] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  check(axes.size() == x.ndim(), "permute: axes rank mismatch");
  Shape out_shape(x.ndim());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = x.shape()[axes[i]];
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
  auto xn = x.node();
  Shape in_shape = x.shape();
  return make_node<T>(
      "permute", out_shape, {x},
      [xn, in_shape, axes](TensorNode<T>& out) {
        permute_raw(xn->values.data(), out.values.data(), in_shape, axes, false);
      },
      [xn, out_shape, inv](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!xn->requires_grad) return;
        permute_raw(g.data(), ctx.buf(xn).data(), out_shape, inv, true);
      });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: inputs must be 4-d");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
  int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto an = a.node(), bn = b.node();
  return make_node<T>(
      "concat", Shape{N, Ca + Cb, a.dim(2), a.dim(3)}, {a, b},
      [an, bn, N, Ca, Cb, hw](TensorNode<T>& out) {
        for (int64_t n = 0; n < N; ++n) {
          std::memcpy(out.values.data() + n * (Ca + Cb) * hw, an->values.data() + n * Ca * hw,
                      sizeof(T) * Ca * hw);
          std::memcpy(out.values.data() + (n * (Ca + Cb) + Ca) * hw,
                      bn->values.data() + n * Cb * hw, sizeof(T) * Cb * hw);
        }
      },
      [an, bn, N, Ca, Cb, hw](const TensorNode<T>&, const std::vector<T>& g,
                              BackwardCtx<T>& ctx) {
        if (an->requires_grad) {
          auto& da = ctx.buf(an);
          for (int64_t n = 0; n < N; ++n)
            accum_range(da, n * Ca * hw, g.data() + n * (Ca + Cb) * hw, Ca * hw);
        }
        if (bn->requires_grad) {
          auto& db = ctx.buf(bn);
          for (int64_t n = 0; n < N; ++n)
            accum_range(db, n * Cb * hw, g.data() + (n * (Ca + Cb) + Ca) * hw, Cb * hw);
        }
      });
}

template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  check(logits.shape() == target.shape(), "bce_dice_loss: shape mismatch " +
                                              shape_str(logits.shape()) + " vs " +
                                              shape_str(target.shape()));
  auto zn = logits.node(), tn = target.node();
  auto prob = std::make_shared<std::vector<T>>();
  return make_node<T>(
      "bce_dice_loss", Shape{1}, {logits, target},
      [zn, tn, prob](TensorNode<T>& out) {
        const auto& z = zn->values;
        const auto& t = tn->values;
        size_t n = z.size();
        prob->resize(n);
        kern::vsigmoid(z.data(), prob->data(), static_cast<int64_t>(n));
        double bce = 0;
        for (size_t i = 0; i < n; ++i) {
          double zi = z[i];
          double e = std::exp(-std::abs(zi));
          bce += std::max(zi, 0.0) - zi * static_cast<double>(t[i]) + std::log1p(e);
        }
        bce /= static_cast<double>(n);
        double inter = 0, psum = 0, tsum = 0;
        for (size_t i = 0; i < n; ++i) {
          inter += static_cast<double>((*prob)[i]) * t[i];
          psum += (*prob)[i];
          tsum += t[i];
        }
        double dice = (2 * inter + 1) / (psum + tsum + 1);
        out.values[0] = static_cast<T>(bce + 1 - dice);
      },
      [zn, tn, prob](const TensorNode<T>&, const std::vector<T>& g, BackwardCtx<T>& ctx) {
        if (!zn->requires_grad) return;
        const auto& t = tn->values;
        const auto& p = *prob;
        size_t n = p.size();
        double inter = 0, psum = 0, tsum = 0;
        for (size_t i = 0; i < n; ++i) {
          inter += static_cast<double>(p[i]) * t[i];
          psum += p[i];
          tsum += t[i];
        }
        double den = psum + tsum + 1;
        double num = 2 * inter + 1;
        auto& dz = ctx.buf(zn);
        T g0 = g[0];
        for (size_t i = 0; i < n; ++i) {
          double pb = p[i];
          double dbce = (pb - t[i]) / static_cast<double>(n);
          double ddice_dp = (2 * t[i] * den - num) / (den * den);
          double dz_i = dbce - ddice_dp * pb * (1 - pb);
          dz[i] += g0 * static_cast<T>(dz_i);
        }
      });
}

#define INSTANTIATE_ELEM(T)                                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                           \
  template Tensor<T> silu<T>(const Tensor<T>&);                               \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                            \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                            \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                     \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);   \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> bce_dice_loss<T>(const Tensor<T>&, const Tensor<T>&);

INSTANTIATE_ELEM(float)
INSTANTIATE_ELEM(double)
#undef INSTANTIATE_ELEM

}  // namespace fcbfuse
