#pragma once

#include <random>
#include <span>
#include <string>

#include "cmsa/graph.hpp"

namespace cmsa {

/// Convolution kernel [kh,kw,Cin/groups,Cout] with bias [Cout] and stride.
template <typename T>
struct ConvBranch {
    BasicTensor<T> kernel;
    BasicTensor<T> bias;
    int stride = 1;
};

/// Inference statistics and affine terms of a batch norm.
template <typename T>
struct BnState {
    BasicTensor<T> gamma, beta, mean, var;
    double epsilon = 1e-5;
};

/// Folds BN into the preceding convolution, per output channel.
/// Throws DataError on a negative variance.
template <typename T>
ConvBranch<T> fold_bn(const ConvBranch<T>& conv, const BnState<T>& bn);

/// Per-channel 1x1 (scale, bias) as a depthwise 3x3 with the scale at the center tap.
template <typename T>
ConvBranch<T> embed_1x1_into_3x3(const BasicTensor<T>& scale, const BasicTensor<T>& bias, int stride = 1);

/// Same for a [1,1,C,C] kernel; throws ConfigError("unmergeable branch ...")
/// unless the kernel is diagonal.
template <typename T>
ConvBranch<T> embed_1x1_into_3x3(const ConvBranch<T>& pointwise);

/// Depthwise 3x3 center impulse with zero bias.
template <typename T>
ConvBranch<T> identity_as_3x3(std::int64_t channels, int stride = 1);

/// [1,1,C,C] identity with zero bias.
template <typename T>
ConvBranch<T> identity_as_1x1(std::int64_t channels);

/// Tap-wise sum of already folded branches. Throws ConfigError when strides
/// or kernel shapes differ.
template <typename T>
ConvBranch<T> merge_branches(std::span<const ConvBranch<T>> branches);

// Reparameterizable layers. Parameter names under a prefix P:
//   depthwise, training: P.dw.{w,b}  P.scale.{w,b}  P.bn.{gamma,beta,mean,var}
//   pointwise, training: P.conv.{w,b}  P.bn.{gamma,beta,mean,var}
//   either, merged:      P.{w,b}

enum class LayerMode { training, merged };

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

struct RepForward {
    LayerMode mode = LayerMode::training;
    /// Batch statistics (and running-stat updates) instead of running statistics.
    bool batch_stats = true;
    double bn_momentum = kBnMomentum;
};

template <typename T>
void init_rep_dw(ParamStore<T>& store, const std::string& prefix, std::int64_t channels, std::mt19937_64& rng);
template <typename T>
void init_rep_pw(ParamStore<T>& store, const std::string& prefix, std::int64_t cin, std::int64_t cout,
                 std::mt19937_64& rng);

/// Depthwise 3x3 (pad 1) + per-channel 1x1 + BN of the input, summed.
template <typename T>
Var<T> rep_dw_forward(Var<T> x, Binder<T>& p, const std::string& prefix, int stride, const RepForward& how);
/// Pointwise convolution followed by BN.
template <typename T>
Var<T> rep_pw_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const RepForward& how);

/// Writes the merged P.{w,b} of a layer into `out`.
template <typename T>
void merge_rep_dw(const ParamStore<T>& in, const std::string& prefix, int stride, ParamStore<T>& out);
template <typename T>
void merge_rep_pw(const ParamStore<T>& in, const std::string& prefix, ParamStore<T>& out);

}  // namespace cmsa
