#include "cmsa/reparam.hpp"

#include <cmath>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"
#include "init.hpp"

namespace cmsa {

template <typename T>
ConvBranch<T> fold_bn(const ConvBranch<T>& conv, const BnState<T>& bn) {
    const auto cout = conv.kernel.dim(-1);
    for (const auto* t : {&bn.gamma, &bn.beta, &bn.mean, &bn.var})
        if (t->numel() != cout) throw ConfigError("fold_bn: statistics length differs from output channels");
    ConvBranch<T> out = conv;
    if (out.bias.empty()) out.bias = BasicTensor<T>({cout});
    for (std::int64_t c = 0; c < cout; ++c) {
        const double var = bn.var[c];
        if (var < 0) throw DataError("fold_bn: negative running variance at channel " + std::to_string(c));
        const double f = static_cast<double>(bn.gamma[c]) / std::sqrt(var + bn.epsilon);
        out.bias[c] = static_cast<T>((static_cast<double>(out.bias[c]) - bn.mean[c]) * f + bn.beta[c]);
    }
    const auto rows = out.kernel.numel() / cout;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cout; ++c) {
            const double f = static_cast<double>(bn.gamma[c]) / std::sqrt(static_cast<double>(bn.var[c]) + bn.epsilon);
            out.kernel[r * cout + c] = static_cast<T>(out.kernel[r * cout + c] * f);
        }
    return out;
}

template <typename T>
ConvBranch<T> embed_1x1_into_3x3(const BasicTensor<T>& scale, const BasicTensor<T>& bias, int stride) {
    const auto c = scale.numel();
    if (bias.numel() != c) throw ConfigError("embed_1x1_into_3x3: bias length differs from scale length");
    ConvBranch<T> out{BasicTensor<T>({3, 3, 1, c}), bias.reshaped({c}), stride};
    for (std::int64_t i = 0; i < c; ++i) out.kernel[4 * c + i] = scale[i];
    return out;
}

template <typename T>
ConvBranch<T> embed_1x1_into_3x3(const ConvBranch<T>& pointwise) {
    const auto& k = pointwise.kernel;
    if (k.rank() != 4 || k.dim(0) != 1 || k.dim(1) != 1)
        throw ConfigError("unmergeable branch: expected a 1x1 kernel, got " + shape_str(k.shape()));
    const auto cin = k.dim(2), cout = k.dim(3);
    if (cin == 1) return embed_1x1_into_3x3(k.reshaped({cout}), pointwise.bias, pointwise.stride);
    if (cin != cout) throw ConfigError("unmergeable branch: 1x1 kernel maps " + std::to_string(cin) + " to " +
                                       std::to_string(cout) + " channels");
    BasicTensor<T> scale({cout});
    for (std::int64_t i = 0; i < cin; ++i)
        for (std::int64_t o = 0; o < cout; ++o) {
            if (i == o)
                scale[o] = k[i * cout + o];
            else if (k[i * cout + o] != T{0})
                throw ConfigError("unmergeable branch: 1x1 kernel mixes channels " + std::to_string(i) + " and " +
                                  std::to_string(o));
        }
    return embed_1x1_into_3x3(scale, pointwise.bias.empty() ? BasicTensor<T>({cout}) : pointwise.bias,
                              pointwise.stride);
}

template <typename T>
ConvBranch<T> identity_as_3x3(std::int64_t channels, int stride) {
    return embed_1x1_into_3x3(BasicTensor<T>({channels}, T{1}), BasicTensor<T>({channels}), stride);
}

template <typename T>
ConvBranch<T> identity_as_1x1(std::int64_t channels) {
    ConvBranch<T> out{BasicTensor<T>({1, 1, channels, channels}), BasicTensor<T>({channels}), 1};
    for (std::int64_t c = 0; c < channels; ++c) out.kernel[c * channels + c] = T{1};
    return out;
}

template <typename T>
ConvBranch<T> merge_branches(std::span<const ConvBranch<T>> branches) {
    if (branches.empty()) throw ConfigError("merge_branches: no branches");
    ConvBranch<T> out = branches[0];
    if (out.bias.empty()) out.bias = BasicTensor<T>({out.kernel.dim(-1)});
    for (std::size_t i = 1; i < branches.size(); ++i) {
        const auto& b = branches[i];
        if (b.stride != out.stride)
            throw ConfigError("merge_branches: stride " + std::to_string(b.stride) + " of branch " + std::to_string(i) +
                              " differs from " + std::to_string(out.stride));
        if (b.kernel.shape() != out.kernel.shape())
            throw ConfigError("merge_branches: kernel " + shape_str(b.kernel.shape()) + " differs from " +
                              shape_str(out.kernel.shape()));
        for (std::int64_t j = 0; j < out.kernel.numel(); ++j) out.kernel[j] += b.kernel[j];
        if (!b.bias.empty())
            for (std::int64_t j = 0; j < out.bias.numel(); ++j) out.bias[j] += b.bias[j];
    }
    return out;
}

template <typename T>
static void init_bn(ParamStore<T>& store, const std::string& prefix, std::int64_t c) {
    store.add(prefix + ".bn.gamma", BasicTensor<T>({c}, T{1}));
    store.add(prefix + ".bn.beta", BasicTensor<T>({c}));
    store.add(prefix + ".bn.mean", BasicTensor<T>({c}), false);
    store.add(prefix + ".bn.var", BasicTensor<T>({c}, T{1}), false);
}

template <typename T>
static BnState<T> bn_state(const ParamStore<T>& store, const std::string& prefix) {
    return {store.get(prefix + ".bn.gamma").value, store.get(prefix + ".bn.beta").value,
            store.get(prefix + ".bn.mean").value, store.get(prefix + ".bn.var").value, kBnEpsilon};
}

template <typename T>
static Var<T> bn_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const RepForward& how) {
    return batch_norm(x, p(prefix + ".bn.gamma"), p(prefix + ".bn.beta"), p.raw(prefix + ".bn.mean").value,
                      p.raw(prefix + ".bn.var").value, {how.batch_stats, how.bn_momentum, kBnEpsilon});
}

template <typename T>
static void require_merged(Binder<T>& p, const std::string& prefix) {
    if (!p.has(prefix + ".w"))
        throw UsageError("layer '" + prefix + "' is not reparameterized; merged mode needs reparameterize() first");
}

template <typename T>
void init_rep_dw(ParamStore<T>& store, const std::string& prefix, std::int64_t channels, std::mt19937_64& rng) {
    store.add(prefix + ".dw.w", detail::init_weight<T>({3, 3, 1, channels}, 9, rng));
    store.add(prefix + ".dw.b", BasicTensor<T>({channels}));
    store.add(prefix + ".scale.w", BasicTensor<T>({1, 1, 1, channels}, T{1}));
    store.add(prefix + ".scale.b", BasicTensor<T>({channels}));
    init_bn(store, prefix, channels);
}

template <typename T>
void init_rep_pw(ParamStore<T>& store, const std::string& prefix, std::int64_t cin, std::int64_t cout,
                 std::mt19937_64& rng) {
    store.add(prefix + ".conv.w", detail::init_weight<T>({1, 1, cin, cout}, cin, rng));
    store.add(prefix + ".conv.b", BasicTensor<T>({cout}));
    init_bn(store, prefix, cout);
}

template <typename T>
Var<T> rep_dw_forward(Var<T> x, Binder<T>& p, const std::string& prefix, int stride, const RepForward& how) {
    const auto c = static_cast<int>(x.dim(3));
    if (how.mode == LayerMode::merged) {
        require_merged(p, prefix);
        return conv2d(x, p(prefix + ".w"), p(prefix + ".b"), {stride, 1, c});
    }
    auto dw = conv2d(x, p(prefix + ".dw.w"), p(prefix + ".dw.b"), {stride, 1, c});
    auto sc = conv2d(x, p(prefix + ".scale.w"), p(prefix + ".scale.b"), {stride, 0, c});
    Var<T> xs = x;
    if (stride != 1) {
        auto& g = p.graph();
        xs = conv2d(x, g.constant(BasicTensor<T>({1, 1, 1, c}, T{1})), std::nullopt, {stride, 0, c});
    }
    return add(add(dw, sc), bn_forward(xs, p, prefix, how));
}

template <typename T>
Var<T> rep_pw_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const RepForward& how) {
    if (how.mode == LayerMode::merged) {
        require_merged(p, prefix);
        return conv2d(x, p(prefix + ".w"), p(prefix + ".b"));
    }
    return bn_forward(conv2d(x, p(prefix + ".conv.w"), p(prefix + ".conv.b")), p, prefix, how);
}

template <typename T>
void merge_rep_dw(const ParamStore<T>& in, const std::string& prefix, int stride, ParamStore<T>& out) {
    const auto& w = in.get(prefix + ".dw.w").value;
    const auto c = w.dim(3);
    const ConvBranch<T> branches[] = {
        {w, in.get(prefix + ".dw.b").value, stride},
        embed_1x1_into_3x3(in.get(prefix + ".scale.w").value.reshaped({c}), in.get(prefix + ".scale.b").value, stride),
        fold_bn(identity_as_3x3<T>(c, stride), bn_state(in, prefix)),
    };
    auto merged = merge_branches<T>(branches);
    out.add(prefix + ".w", std::move(merged.kernel));
    out.add(prefix + ".b", std::move(merged.bias));
}

template <typename T>
void merge_rep_pw(const ParamStore<T>& in, const std::string& prefix, ParamStore<T>& out) {
    auto folded = fold_bn(ConvBranch<T>{in.get(prefix + ".conv.w").value, in.get(prefix + ".conv.b").value, 1},
                          bn_state(in, prefix));
    out.add(prefix + ".w", std::move(folded.kernel));
    out.add(prefix + ".b", std::move(folded.bias));
}

#define CMSA_INSTANTIATE_REPARAM(T)                                                                                  \
    template ConvBranch<T> fold_bn(const ConvBranch<T>&, const BnState<T>&);                                         \
    template ConvBranch<T> embed_1x1_into_3x3(const BasicTensor<T>&, const BasicTensor<T>&, int);                    \
    template ConvBranch<T> embed_1x1_into_3x3(const ConvBranch<T>&);                                                 \
    template ConvBranch<T> identity_as_3x3(std::int64_t, int);                                                       \
    template ConvBranch<T> identity_as_1x1(std::int64_t);                                                            \
    template ConvBranch<T> merge_branches(std::span<const ConvBranch<T>>);                                           \
    template void init_rep_dw(ParamStore<T>&, const std::string&, std::int64_t, std::mt19937_64&);                   \
    template void init_rep_pw(ParamStore<T>&, const std::string&, std::int64_t, std::int64_t, std::mt19937_64&);     \
    template Var<T> rep_dw_forward(Var<T>, Binder<T>&, const std::string&, int, const RepForward&);                  \
    template Var<T> rep_pw_forward(Var<T>, Binder<T>&, const std::string&, const RepForward&);                       \
    template void merge_rep_dw(const ParamStore<T>&, const std::string&, int, ParamStore<T>&);                        \
    template void merge_rep_pw(const ParamStore<T>&, const std::string&, ParamStore<T>&);

CMSA_INSTANTIATE_REPARAM(float)
CMSA_INSTANTIATE_REPARAM(double)

}  // namespace cmsa
