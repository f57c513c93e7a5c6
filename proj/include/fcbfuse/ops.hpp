#pragma once

#include <utility>

#include "fcbfuse/tensor.hpp"

// Differentiable operations. Each op validates shapes, computes the forward
// value eagerly, and (when gradient tracking is on and an input requires
// grad) records itself on the computation graph.
namespace fcbfuse {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);  // -> shape [1]
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes);

// x [..., In] * w [Out, In]^T + b -> [..., Out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 std::pair<int64_t, int64_t> stride, std::pair<int64_t, int64_t> padding);

// weight [C,1,kh,kw], stride 1, zero padding kh/2 x kw/2
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t num_groups, T eps, const Tensor<T>& gamma,
                     const Tensor<T>& beta);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps, const Tensor<T>& gamma, const Tensor<T>& beta);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

enum class InterpMode { kNearest, kBilinear };

template <typename T>
Tensor<T> interpolate2d(const Tensor<T>& x, int64_t out_h, int64_t out_w, InterpMode mode,
                        bool antialias);

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int64_t out_h, int64_t out_w);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// [N,L,D] <-> [N,D,H,W] with tokens in spatial row-major order
template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& t, int64_t H, int64_t W);
template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x);

// s[B,M,N] = scale * q[B,M,D] k[B,N,D]^T
template <typename T>
Tensor<T> matmul_qk(const Tensor<T>& q, const Tensor<T>& k, T scale);
// o[B,M,D] = p[B,M,N] v[B,N,D]
template <typename T>
Tensor<T> matmul_pv(const Tensor<T>& p, const Tensor<T>& v);

// Mean binary cross entropy from logits (stable log-sum-exp form) plus
// (1 - soft Dice) with smoothing 1, pooled over the whole batch. The target
// is treated as a constant; gradients flow to the logits only.
template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& target);

}  // namespace fcbfuse
