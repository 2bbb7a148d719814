#pragma once

#include <optional>
#include <type_traits>
#include <span>
#include <vector>

#include "cmsa/graph.hpp"

namespace cmsa {

// Differentiable primitives. Feature maps are N x H x W x C; every op records a
// node on the operands' graph and returns its handle.

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

/// Cross-correlation. kernel is [kh, kw, Cin/groups, Cout]; depthwise is
/// groups == Cin == Cout, pointwise is a 1x1 kernel with groups == 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, Conv2dOptions options = {});

/// input [..., Din] x weight [Din, Dout] (+ bias [Dout]).
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, std::optional<std::type_identity_t<Var<T>>> bias);

template <typename T>
Var<T> softmax_last(Var<T> input);

/// Exact x * Phi(x) with the erf-based Gaussian CDF.
template <typename T>
Var<T> gelu(Var<T> input);

struct BatchNormOptions {
    bool training = true;
    double momentum = 0.1;
    double epsilon = 1e-5;
};

/// Normalizes over N, H, W per channel. In training mode the running
/// statistics are updated in place (unbiased variance).
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BasicTensor<T>& running_mean,
                  BasicTensor<T>& running_var, BatchNormOptions options = {});

template <typename T>
Var<T> layer_norm(Var<T> input, Var<T> gamma, Var<T> beta, double epsilon = 1e-6);

/// No implicit padding: H and W must be divisible by the stride.
template <typename T>
Var<T> avg_pool2d(Var<T> input, int kernel = 2, int stride = 2);

/// [N, H, W, C] -> [N, C]
template <typename T>
Var<T> global_avg_pool(Var<T> input);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, double factor);
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

/// Concatenate along the last axis; leading dims must agree.
template <typename T>
Var<T> concat_last(std::span<const Var<T>> parts);
template <typename T>
Var<T> concat_last(std::initializer_list<Var<T>> parts) {
    std::vector<Var<T>> v(parts);
    return concat_last<T>(std::span<const Var<T>>(v));
}

/// Channels [start, start + length) of the last axis.
template <typename T>
Var<T> slice_last(Var<T> a, std::int64_t start, std::int64_t length);

/// Mean over the batch of -sum_k q_k log softmax(logits)_k with
/// q = (1 - smoothing) * onehot(label) + smoothing / K.
template <typename T>
Var<T> cross_entropy_smoothed(Var<T> logits, std::span<const int> labels, double smoothing);

/// [N,H,W,C] -> [N*(H/s)*(W/t), s*t, C]; windows row-major over the grid,
/// tokens row-major inside each window.
template <typename T>
Var<T> window_partition(Var<T> x, int s, int t);

/// Exact inverse of window_partition.
template <typename T>
Var<T> window_reverse(Var<T> windows, std::int64_t n, std::int64_t h, std::int64_t w, int s, int t);

/// Scaled dot-product attention per window and head.
/// q [B, Lq, d], k [B, Lk, d], v [B, Lk, dv] -> [B, Lq, dv]. Head i uses
/// channels [i*d/heads, (i+1)*d/heads) of q and k and the matching slice of v.
template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, int heads);

}  // namespace cmsa
