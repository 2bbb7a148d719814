#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cmsa/graph.hpp"

namespace cmsa {

/// One head group: window (s, t), channel width d, head count.
struct GroupSpec {
    int s = 0;
    int t = 0;
    int d = 0;
    int heads = 1;

    friend bool operator==(const GroupSpec&, const GroupSpec&) = default;
};

/// Component toggles. Rows of the ablation table:
///   1 standard attention, 2 grouped, 3 + cascade, 4 + channel fusion,
///   5 + spatial fusion (the full unit).
struct AblationFlags {
    bool grouped_attention = true;
    bool cascade = true;
    bool spatial_fusion = true;
    bool channel_fusion = true;

    static AblationFlags table_row(int row);
    /// Row id for these flags, or 0 when they match no row.
    int row() const;

    friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct CmsaConfig {
    std::vector<GroupSpec> groups;
    /// Keys and values come from a 2x2 average-pooled map.
    bool kv_halved = false;
    /// Spatial fusion emits values 2*d wide.
    bool value_double = false;
    /// Alternating shifted windows; not supported, must stay off.
    bool shifted_windows = false;
    AblationFlags ablation;

    /// Sum of d_k: width of the Q, K and V projections.
    int inner_width() const;
    int heads_total() const;
    /// Value width of group k (1-based).
    int value_width(int k) const;
    /// Width of the concatenation fed to the output linear.
    int output_width() const;
    /// Channels entering channel/spatial fusion of group k.
    int fusion_width(int k) const;
    int group_count() const { return static_cast<int>(groups.size()); }

    /// Throws ConfigError unless the groups fit an H x W stage.
    void validate(std::int64_t h, std::int64_t w) const;

    friend bool operator==(const CmsaConfig&, const CmsaConfig&) = default;
};

/// Registers the unit's parameters as "<prefix>q.w", "<prefix>g2.cf.w", ...
/// Pointwise kernels are [1,1,Cin,Cout]; the output linear is [output_width, C].
template <typename T>
void init_cmsa_params(ParamStore<T>& store, const std::string& prefix, int channels, const CmsaConfig& config,
                      std::mt19937_64& rng);

/// Sets group k's spatial fusion to a center-impulse depthwise kernel and a
/// pointwise identity on the first min(in, out) channels, biases zero.
template <typename T>
void identity_init_spatial_fusion(ParamStore<T>& store, const std::string& prefix, int k);

/// Identity on the first min(in, out) channels of a [1,1,Cin,Cout] kernel, zero elsewhere.
template <typename T>
void set_pointwise_identity(BasicTensor<T>& kernel);

template <typename T>
struct Qkv {
    Var<T> q, k, v;
};

template <typename T>
struct KeyValue {
    Var<T> k, v;
};

/// Three bias-free pointwise projections C -> D.
template <typename T>
Qkv<T> qkv_project(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& config);

/// Contiguous channel slices in group order.
template <typename T>
std::vector<Qkv<T>> split_groups(const Qkv<T>& qkv, const CmsaConfig& config);

/// Width-preserving pointwise convolution of group k (k >= 2).
template <typename T>
Var<T> channel_fusion(Var<T> cat, Binder<T>& p, const std::string& prefix, int k);

/// DW3x3 -> GeLU -> PW to d_k + dv_k channels, 2x2 average pooling when
/// kv_halved, split into (K', V'). With spatial fusion ablated only the
/// pointwise stage remains.
template <typename T>
KeyValue<T> spatial_fusion(Var<T> cat, Binder<T>& p, const std::string& prefix, int k, const CmsaConfig& config);

/// Group k's attention stream X'_k. `prev` is X'_{k-1} and must be absent at k = 1.
template <typename T>
Var<T> cascade_step(int k, const Qkv<T>& group, std::optional<Var<T>> prev, Binder<T>& p, const std::string& prefix,
                    const CmsaConfig& config);

/// Full unit, [N,H,W,C] -> [N,H,W,C]. When `streams` is given it receives X'_1..X'_n.
template <typename T>
Var<T> cmsa_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& config,
                    std::vector<Var<T>>* streams = nullptr);

}  // namespace cmsa
