#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mfil/autograd.hpp"

// Differentiable primitives. Each forward checks shapes, computes its output
// with explicit loops, verifies finiteness, and records a backward rule on the
// tape of its first input. Convolutions use the cross-correlation convention.
namespace mfil::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
/// Adds a [D] bias along the trailing axis of x.
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Mean over one axis; the axis is removed from the shape.
template <typename T> Var<T> mean_axis(const Var<T>& x, std::size_t axis);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
/// out.shape[i] = x.shape[perm[i]].
template <typename T> Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm);
template <typename T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
/// Selects positions `index` along `axis` (index_select); repeated indices scatter-add.
template <typename T> Var<T> gather(const Var<T>& x, std::size_t axis, std::vector<std::size_t> index);

/// [N,C_in,H,W] * [C_out,C_in,kH,kW] -> [N,C_out,H',W'], H' = (H+2p-kH)/s + 1.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
              std::size_t stride, std::size_t padding);
/// Per-channel convolution with kernel [C,1,kH,kW].
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
                        std::size_t stride, std::size_t padding);

/// y = x W^T + b over the trailing axis; weight is [D_out, D_in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T> Var<T> silu(const Var<T>& x);
/// Exact (erf) GELU.
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> softplus(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
/// Max-shifted softmax along `axis`.
template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);

/// sum_k alpha[k] * maps[k]; alpha has shape [K].
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& maps, const Var<T>& alpha);

/// Mean cross-entropy of [B,K] logits against integer labels with label smoothing.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, T smoothing);

/// Scales sample b of x (leading axis) by mask[b]. Used for stochastic depth.
template <typename T>
Var<T> scale_samples(const Var<T>& x, std::vector<T> mask);

// Scalar helpers shared with kernels that fuse these functions.
template <typename T> T softplus_scalar(T x);
template <typename T> T sigmoid_scalar(T x);

}  // namespace mfil::ops
