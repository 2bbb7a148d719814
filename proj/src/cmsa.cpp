#include "cmsa/cmsa.hpp"

#include <cmath>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"
#include "cmsa/window.hpp"
#include "init.hpp"

namespace cmsa {

AblationFlags AblationFlags::table_row(int row) {
    switch (row) {
        case 1: return {false, false, false, false};
        case 2: return {true, false, false, false};
        case 3: return {true, true, false, false};
        case 4: return {true, true, false, true};
        case 5: return {true, true, true, true};
        default: throw ConfigError("ablation row must be in 1..5, got " + std::to_string(row));
    }
}

int AblationFlags::row() const {
    for (int r = 1; r <= 5; ++r)
        if (table_row(r) == *this) return r;
    return 0;
}

int CmsaConfig::inner_width() const {
    int d = 0;
    for (const auto& g : groups) d += g.d;
    return d;
}

int CmsaConfig::heads_total() const {
    int h = 0;
    for (const auto& g : groups) h += g.heads;
    return h;
}

int CmsaConfig::value_width(int k) const {
    const int d = groups.at(static_cast<std::size_t>(k - 1)).d;
    return value_double ? 2 * d : d;
}

int CmsaConfig::output_width() const {
    if (!ablation.grouped_attention) return inner_width();
    int w = 0;
    for (int k = 1; k <= group_count(); ++k) w += value_width(k);
    return w;
}

int CmsaConfig::fusion_width(int k) const {
    const int d = groups.at(static_cast<std::size_t>(k - 1)).d;
    return 2 * d + (ablation.cascade && k > 1 ? value_width(k - 1) : 0);
}

void CmsaConfig::validate(std::int64_t h, std::int64_t w) const {
    if (shifted_windows) throw ConfigError("cmsa.shifted_windows: shifted windows are not supported");
    if (groups.empty()) throw ConfigError("cmsa.groups: at least one group is required");
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto& g = groups[i];
        const std::string where = "cmsa.groups[" + std::to_string(i) + "]";
        if (g.d <= 0 || g.heads <= 0) throw ConfigError(where + ": d and heads must be positive");
        if (g.d % g.heads != 0)
            throw ConfigError(where + ": d=" + std::to_string(g.d) + " not divisible by heads=" + std::to_string(g.heads));
        if (!ablation.grouped_attention) continue;
        WindowGrid::tile(h, w, g.s, g.t);
        if (kv_halved && (g.s % 2 != 0 || g.t % 2 != 0))
            throw ConfigError(where + ": kv_halved needs even window sides, got s=" + std::to_string(g.s) +
                              " t=" + std::to_string(g.t));
    }
    if (ablation.grouped_attention && (groups[0].s != h || groups[0].t != w)) {
        throw ConfigError("cmsa.groups[0]: first group must be global, window " + std::to_string(groups[0].s) + "x" +
                          std::to_string(groups[0].t) + " vs stage " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (!ablation.grouped_attention && inner_width() % heads_total() != 0)
        throw ConfigError("cmsa: inner width not divisible by the total head count");
}

template <typename T>
void set_pointwise_identity(BasicTensor<T>& kernel) {
    const auto cin = kernel.dim(2), cout = kernel.dim(3);
    for (auto& v : kernel.data()) v = T{0};
    for (std::int64_t c = 0; c < std::min(cin, cout); ++c) kernel[c * cout + c] = T{1};
}

template <typename T>
void init_cmsa_params(ParamStore<T>& store, const std::string& prefix, int channels, const CmsaConfig& config,
                      std::mt19937_64& rng) {
    const int D = config.inner_width();
    for (const char* name : {"q.w", "k.w", "v.w"})
        store.add(prefix + name, detail::init_weight<T>({1, 1, channels, D}, channels, rng));
    if (config.ablation.grouped_attention) {
        for (int k = 1; k <= config.group_count(); ++k) {
            const std::string g = prefix + "g" + std::to_string(k) + ".";
            const int cc = config.fusion_width(k);
            const int out = config.groups[static_cast<std::size_t>(k - 1)].d + config.value_width(k);
            if (k > 1 && config.ablation.channel_fusion) {
                store.add(g + "cf.w", detail::init_weight<T>({1, 1, cc, cc}, cc, rng));
                store.add(g + "cf.b", BasicTensor<T>({cc}));
            }
            if (config.ablation.spatial_fusion) {
                store.add(g + "sf.dw.w", detail::init_weight<T>({3, 3, 1, cc}, 9, rng));
                store.add(g + "sf.dw.b", BasicTensor<T>({cc}));
            }
            store.add(g + "sf.pw.w", detail::init_weight<T>({1, 1, cc, out}, cc, rng));
            store.add(g + "sf.pw.b", BasicTensor<T>({out}));
        }
    }
    const int ow = config.output_width();
    store.add(prefix + "out.w", detail::init_weight<T>({ow, channels}, ow, rng));
    store.add(prefix + "out.b", BasicTensor<T>({channels}));
}

template <typename T>
void identity_init_spatial_fusion(ParamStore<T>& store, const std::string& prefix, int k) {
    const std::string g = prefix + "g" + std::to_string(k) + ".sf.";
    if (store.contains(g + "dw.w")) {
        auto& dw = store.get(g + "dw.w").value;
        const auto cc = dw.dim(3);
        for (auto& v : dw.data()) v = T{0};
        for (std::int64_t c = 0; c < cc; ++c) dw[4 * cc + c] = T{1};
        for (auto& v : store.get(g + "dw.b").value.data()) v = T{0};
    }
    set_pointwise_identity(store.get(g + "pw.w").value);
    for (auto& v : store.get(g + "pw.b").value.data()) v = T{0};
}

template <typename T>
Qkv<T> qkv_project(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& config) {
    if (x.value().rank() != 4) throw ConfigError("qkv_project: input must be N x H x W x C");
    const int D = config.inner_width();
    Qkv<T> out{conv2d(x, p(prefix + "q.w"), std::nullopt), conv2d(x, p(prefix + "k.w"), std::nullopt),
               conv2d(x, p(prefix + "v.w"), std::nullopt)};
    if (out.q.dim(3) != D || out.k.dim(3) != D || out.v.dim(3) != D)
        throw ConfigError("qkv_project: projection width differs from the sum of group widths " + std::to_string(D));
    return out;
}

template <typename T>
std::vector<Qkv<T>> split_groups(const Qkv<T>& qkv, const CmsaConfig& config) {
    const int D = config.inner_width();
    for (const auto& v : {qkv.q, qkv.k, qkv.v})
        if (v.dim(3) != D)
            throw ConfigError("split_groups: width " + std::to_string(v.dim(3)) + " does not match sum of d_k = " +
                              std::to_string(D));
    std::vector<Qkv<T>> out;
    if (config.groups.size() == 1) {
        out.push_back(qkv);
        return out;
    }
    std::int64_t start = 0;
    for (const auto& g : config.groups) {
        out.push_back({slice_last(qkv.q, start, g.d), slice_last(qkv.k, start, g.d), slice_last(qkv.v, start, g.d)});
        start += g.d;
    }
    return out;
}

template <typename T>
Var<T> channel_fusion(Var<T> cat, Binder<T>& p, const std::string& prefix, int k) {
    if (k < 2) throw UsageError("channel_fusion: group 1 has no channel fusion");
    const std::string g = prefix + "g" + std::to_string(k) + ".cf.";
    return conv2d(cat, p(g + "w"), p(g + "b"));
}

template <typename T>
KeyValue<T> spatial_fusion(Var<T> cat, Binder<T>& p, const std::string& prefix, int k, const CmsaConfig& config) {
    const std::string g = prefix + "g" + std::to_string(k) + ".sf.";
    const int d = config.groups.at(static_cast<std::size_t>(k - 1)).d;
    const int dv = config.value_width(k);
    if (config.kv_halved && (cat.dim(1) % 2 != 0 || cat.dim(2) % 2 != 0)) {
        throw ConfigError("spatial_fusion: kv_halved needs even map sides, got " + std::to_string(cat.dim(1)) + "x" +
                          std::to_string(cat.dim(2)));
    }
    Var<T> h = cat;
    if (config.ablation.spatial_fusion) {
        const auto c = static_cast<int>(cat.dim(3));
        h = gelu(conv2d(h, p(g + "dw.w"), p(g + "dw.b"), {1, 1, c}));
    }
    h = conv2d(h, p(g + "pw.w"), p(g + "pw.b"));
    if (h.dim(3) != d + dv) throw ConfigError("spatial_fusion: pointwise output width must be d + dv");
    if (config.kv_halved) h = avg_pool2d(h, 2, 2);
    return {slice_last(h, 0, d), slice_last(h, d, dv)};
}

template <typename T>
Var<T> cascade_step(int k, const Qkv<T>& group, std::optional<Var<T>> prev, Binder<T>& p, const std::string& prefix,
                    const CmsaConfig& config) {
    if (k < 1 || k > config.group_count()) throw UsageError("cascade_step: group index out of range");
    if (k == 1 && prev) throw UsageError("cascade_step: group 1 takes no previous stream");
    const auto& spec = config.groups[static_cast<std::size_t>(k - 1)];
    std::vector<Var<T>> parts{group.k, group.v};
    if (config.ablation.cascade && k > 1) {
        if (!prev) throw UsageError("cascade_step: group " + std::to_string(k) + " needs the previous stream");
        if (prev->dim(3) != config.value_width(k - 1))
            throw ConfigError("cascade_step: previous stream width does not match dv of group " + std::to_string(k - 1));
        parts.push_back(*prev);
    }
    Var<T> cat = concat_last<T>(std::span<const Var<T>>(parts));
    if (k > 1 && config.ablation.channel_fusion) cat = channel_fusion(cat, p, prefix, k);
    const auto kv = spatial_fusion(cat, p, prefix, k, config);
    return mh_window_attention(group.q, kv.k, kv.v, spec.s, spec.t, spec.heads);
}

template <typename T>
Var<T> cmsa_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& config,
                    std::vector<Var<T>>* streams) {
    if (x.value().rank() != 4) throw ConfigError("cmsa_forward: input must be N x H x W x C");
    config.validate(x.dim(1), x.dim(2));
    const auto qkv = qkv_project(x, p, prefix, config);
    Var<T> mixed;
    if (!config.ablation.grouped_attention) {
        mixed = mh_window_attention(qkv.q, qkv.k, qkv.v, static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)),
                                    config.heads_total());
        if (streams) streams->push_back(mixed);
    } else {
        const auto groups = split_groups(qkv, config);
        std::vector<Var<T>> outs;
        std::optional<Var<T>> prev;
        for (int k = 1; k <= config.group_count(); ++k) {
            auto xk = cascade_step(k, groups[static_cast<std::size_t>(k - 1)], config.ablation.cascade ? prev : std::nullopt,
                                   p, prefix, config);
            outs.push_back(xk);
            prev = xk;
        }
        if (streams) streams->insert(streams->end(), outs.begin(), outs.end());
        mixed = outs.size() == 1 ? outs[0] : concat_last<T>(std::span<const Var<T>>(outs));
    }
    return linear(mixed, p(prefix + "out.w"), p(prefix + "out.b"));
}

#define CMSA_INSTANTIATE_CORE(T)                                                                                      \
    template void init_cmsa_params(ParamStore<T>&, const std::string&, int, const CmsaConfig&, std::mt19937_64&);    \
    template void identity_init_spatial_fusion(ParamStore<T>&, const std::string&, int);                             \
    template void set_pointwise_identity(BasicTensor<T>&);                                                            \
    template Qkv<T> qkv_project(Var<T>, Binder<T>&, const std::string&, const CmsaConfig&);                          \
    template std::vector<Qkv<T>> split_groups(const Qkv<T>&, const CmsaConfig&);                                     \
    template Var<T> channel_fusion(Var<T>, Binder<T>&, const std::string&, int);                                     \
    template KeyValue<T> spatial_fusion(Var<T>, Binder<T>&, const std::string&, int, const CmsaConfig&);                  \
    template Var<T> cascade_step(int, const Qkv<T>&, std::optional<Var<T>>, Binder<T>&, const std::string&,          \
                                 const CmsaConfig&);                                                                  \
    template Var<T> cmsa_forward(Var<T>, Binder<T>&, const std::string&, const CmsaConfig&, std::vector<Var<T>>*);

CMSA_INSTANTIATE_CORE(float)
CMSA_INSTANTIATE_CORE(double)

}  // namespace cmsa
