#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmsa/cmsa.hpp"
#include "cmsa/grad_check.hpp"

namespace cmsa {

/// Outcome of one self-check: the worst observed value against its tolerance.
struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

/// Trainable counts of S, B and L against 4.2M, 5.7M and 7.4M within 10%,
/// in both training and merged form.
CheckResult check_parameter_counts();

/// Every reparameterizable layer (stem, patch-embedding and positional
/// convolutions), merged against branched, each on `inputs` random inputs.
CheckResult check_reparam_layers(const std::string& variant, int inputs, std::uint64_t seed);
/// Whole-model logits, merged against branched, on `inputs` random 32x32 images.
CheckResult check_reparam_end_to_end(const std::string& variant, int inputs, std::uint64_t seed);

/// Every differentiable primitive in 64-bit against central differences.
CheckResult check_primitive_gradients(std::uint64_t seed);

/// Toy block: 32 channels on an 8x6 map, a global and a 4x2-window group.
CmsaConfig toy_block_attention();

/// 32-bit block gradients at five scalars drawn uniformly over every
/// trainable parameter, against central differences (step 1e-3) of the
/// block's 64-bit shadow.
GradCheckReport block_gradient_check(std::uint64_t seed);
/// The same block in 64-bit: a few coordinates of every parameter tensor and
/// of the input, step 1e-3.
GradCheckReport block_gradient_check_shadow(std::uint64_t seed);
CheckResult check_block_gradients(std::uint64_t seed);

/// One global group, identity spatial fusion: the unit against a dense
/// self-attention oracle on random 1x4x4x8 inputs.
CheckResult check_dense_attention_oracle(std::uint64_t seed);
/// mh_window_attention against a per-window loop, maps up to 1x8x8x8.
CheckResult check_window_attention_oracle(std::uint64_t seed);

/// Window partition followed by reverse reproduces the input bit for bit.
CheckResult check_window_round_trip(std::uint64_t seed);
/// Perturbing group k leaves the streams of groups < k bitwise unchanged.
CheckResult check_cascade_causality(std::uint64_t seed);
/// Output shape equals input shape for every stage configuration of S, B, L.
CheckResult check_shape_preservation(std::uint64_t seed);

/// "PASS <name> value=<v> tol=<t> <detail>" or "FAIL ...".
std::string format_check(const CheckResult& r);
/// Machine-readable record: check=<name> value=<v> threshold=<t> verdict=pass|fail detail="...".
std::string format_record(const CheckResult& r);

}  // namespace cmsa
