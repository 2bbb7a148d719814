#pragma once

#include <cstdint>
#include <string>

#include "cmsa/config.hpp"
#include "cmsa/graph.hpp"
#include "cmsa/reparam.hpp"

namespace cmsa {

/// Forward-pass settings shared by every layer of a model.
struct ForwardOptions {
    LayerMode mode = LayerMode::training;
    /// Batch statistics in every batch norm (training); running statistics otherwise.
    bool training = true;
    /// Weight of the current batch in running-statistic updates.
    double bn_momentum = kBnMomentum;
};

struct Model {
    ModelConfig config;
    LayerMode mode = LayerMode::training;
    ParamStore<float> params;
};

/// Registers every parameter of the training-overparameterized network.
template <typename T>
void init_model_params(ParamStore<T>& store, const ModelConfig& config, std::mt19937_64& rng);

/// Registers one block's parameters under `prefix` (see block_forward).
template <typename T>
void init_block_params(ParamStore<T>& store, const std::string& prefix, int channels, const CmsaConfig& attention,
                       int ffn_ratio, std::mt19937_64& rng);

/// Validates the configuration and initializes a training-mode model.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// GeLU of the reparameterizable depthwise layer; no residual.
template <typename T>
Var<T> positional_embed(Var<T> x, Binder<T>& p, const std::string& prefix, const ForwardOptions& how);

/// Stride-2 depthwise then pointwise to the next stage width.
template <typename T>
Var<T> patch_embed(Var<T> x, Binder<T>& p, const std::string& prefix, const ForwardOptions& how);

/// Two depthwise/pointwise pairs, each followed by GeLU.
template <typename T>
Var<T> stem(Var<T> image, Binder<T>& p, const ModelConfig& config, const ForwardOptions& how);

/// X_pe = PE(X); X_attn = CMSA(BN(X_pe)) + X_pe; X_out = FFN(LN(X_attn)) + X_attn.
template <typename T>
Var<T> block_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& attention,
                     const ForwardOptions& how);

/// images [N,H,W,C] -> logits [N, classes].
template <typename T>
Var<T> forward(Var<T> images, Binder<T>& p, const ModelConfig& config, const ForwardOptions& how);

/// Scalar learnables in the model's current mode.
std::int64_t parameter_count(const Model& model);

/// Merged copy: every reparameterizable layer collapses to one convolution.
/// A merged model is returned unchanged.
Model reparameterize(const Model& model);

/// Worst elementwise logit difference between two models over random inputs,
/// both run with running statistics. Throws UsageError when configs differ.
double verify_equivalence(const Model& a, const Model& b, int trials, const Shape& input_shape, std::uint64_t seed);

/// Sets every running statistic to the statistics of one training-mode pass
/// over `images`, as after training on data like them.
void calibrate_batch_norms(Model& model, const Tensor& images);

/// Random positive running statistics and non-trivial affine terms in every
/// batch norm, so that folding is exercised.
template <typename T>
void randomize_batch_norms(ParamStore<T>& store, std::mt19937_64& rng);

/// randomize_batch_norms plus random per-channel scales and biases in every
/// reparameterizable branch.
template <typename T>
void randomize_branches(ParamStore<T>& store, std::mt19937_64& rng);

/// Parameter-name prefixes of the reparameterizable layers with their strides.
std::vector<std::pair<std::string, int>> rep_dw_layers(const ModelConfig& config);
std::vector<std::string> rep_pw_layers(const ModelConfig& config);

/// "s<i>.b<j>"
std::string block_prefix(int stage, int block);

}  // namespace cmsa
