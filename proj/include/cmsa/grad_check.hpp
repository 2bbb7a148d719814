#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmsa/graph.hpp"

namespace cmsa {

/// Builds a forward computation on `graph` from the differentiable inputs.
/// A non-scalar result is reduced to a scalar by a fixed random projection.
template <typename T>
using GraphBuilder = std::function<Var<T>(Graph<T>& graph, std::span<const Var<T>> inputs)>;

struct GradCheckOptions {
    double eps = 1e-3;
    /// Coordinates sampled per input tensor (and per parameter).
    int samples_per_tensor = 8;
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    double abs_floor = 1e-3;
    /// When positive, this many coordinates are drawn uniformly over all input
    /// and parameter scalars together, replacing samples_per_tensor.
    int samples_total = 0;
    std::uint64_t seed = 0x5eed;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t coordinates = 0;
    std::string worst;  // "<tensor>[<flat index>] analytic=.. numeric=.."
};

/// Compares reverse-mode gradients against central differences
///   (f(x + eps) - f(x - eps)) / (2 eps)
/// on sampled coordinates of every input and of every listed parameter.
/// Relative error is |a - n| / max(|a|, |n|, abs_floor).
/// Throws UsageError when two evaluations at the same point disagree.
template <typename T>
GradCheckReport grad_check(const GraphBuilder<T>& fn, std::vector<BasicTensor<T>> inputs, const GradCheckOptions& options,
                           std::span<Parameter<T>* const> params = {});

/// Reverse-mode gradients of a 32-bit function against central differences
/// of its 64-bit shadow. The shadow starts from the same values cast to
/// double; `shadow_params[i]` mirrors `params[i]`.
GradCheckReport grad_check_shadowed(const GraphBuilder<float>& fn, const GraphBuilder<double>& shadow_fn,
                                    const std::vector<Tensor>& inputs, const GradCheckOptions& options,
                                    std::span<Parameter<float>* const> params = {},
                                    std::span<Parameter<double>* const> shadow_params = {});

}  // namespace cmsa
