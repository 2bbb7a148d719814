#include "cmsa/network.hpp"

#include <algorithm>
#include <random>

#include "cmsa/cmsa.hpp"
#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"
#include "init.hpp"

namespace cmsa {

namespace {

int stem_stride_of(const ModelConfig& c, int pair) {
    if (pair == 0) return c.stem_stride >= 2 ? 2 : 1;
    return c.stem_stride == 4 ? 2 : 1;
}

RepForward rep_how(const ForwardOptions& how) { return {how.mode, how.training, how.bn_momentum}; }

constexpr const char* kRepSuffixes[] = {".dw.w",     ".dw.b",    ".scale.w", ".scale.b", ".conv.w", ".conv.b",
                                        ".bn.gamma", ".bn.beta", ".bn.mean", ".bn.var"};

}  // namespace

std::string block_prefix(int stage, int block) { return "s" + std::to_string(stage) + ".b" + std::to_string(block); }

std::vector<std::pair<std::string, int>> rep_dw_layers(const ModelConfig& config) {
    std::vector<std::pair<std::string, int>> out{{"stem.0.dw", stem_stride_of(config, 0)},
                                                 {"stem.1.dw", stem_stride_of(config, 1)}};
    for (std::size_t i = 0; i < config.stages.size(); ++i) {
        if (i > 0) out.emplace_back("s" + std::to_string(i) + ".embed.dw", 2);
        for (int j = 0; j < config.stages[i].blocks; ++j) out.emplace_back(block_prefix(static_cast<int>(i), j) + ".pe", 1);
    }
    return out;
}

std::vector<std::string> rep_pw_layers(const ModelConfig& config) {
    std::vector<std::string> out{"stem.0.pw", "stem.1.pw"};
    for (std::size_t i = 1; i < config.stages.size(); ++i) out.push_back("s" + std::to_string(i) + ".embed.pw");
    return out;
}

template <typename T>
void init_block_params(ParamStore<T>& store, const std::string& b, int c, const CmsaConfig& attention, int ffn_ratio,
                       std::mt19937_64& rng) {
    init_rep_dw(store, b + ".pe", c, rng);
    store.add(b + ".norm1.gamma", BasicTensor<T>({c}, T{1}));
    store.add(b + ".norm1.beta", BasicTensor<T>({c}));
    store.add(b + ".norm1.mean", BasicTensor<T>({c}), false);
    store.add(b + ".norm1.var", BasicTensor<T>({c}, T{1}), false);
    init_cmsa_params(store, b + ".attn.", c, attention, rng);
    store.add(b + ".norm2.gamma", BasicTensor<T>({c}, T{1}));
    store.add(b + ".norm2.beta", BasicTensor<T>({c}));
    const int hidden = c * ffn_ratio;
    store.add(b + ".ffn.fc1.w", detail::init_weight<T>({c, hidden}, c, rng));
    store.add(b + ".ffn.fc1.b", BasicTensor<T>({hidden}));
    store.add(b + ".ffn.fc2.w", detail::init_weight<T>({hidden, c}, hidden, rng));
    store.add(b + ".ffn.fc2.b", BasicTensor<T>({c}));
}

template <typename T>
void init_model_params(ParamStore<T>& store, const ModelConfig& config, std::mt19937_64& rng) {
    const int c0 = config.stem_channels;
    init_rep_dw(store, "stem.0.dw", config.in_channels, rng);
    init_rep_pw(store, "stem.0.pw", config.in_channels, c0, rng);
    init_rep_dw(store, "stem.1.dw", c0, rng);
    init_rep_pw(store, "stem.1.pw", c0, c0, rng);
    int prev = c0;
    for (std::size_t i = 0; i < config.stages.size(); ++i) {
        const auto& st = config.stages[i];
        const int c = st.channels;
        if (i > 0 || prev != c) {
            if (i == 0) throw ConfigError("model.stem_channels: must equal model.stages[0].channels");
            const std::string e = "s" + std::to_string(i) + ".embed";
            init_rep_dw(store, e + ".dw", prev, rng);
            init_rep_pw(store, e + ".pw", prev, c, rng);
        }
        for (int j = 0; j < st.blocks; ++j)
            init_block_params(store, block_prefix(static_cast<int>(i), j), c, st.attention, config.ffn_ratio, rng);
        prev = c;
    }
    const int merged_in = prev * config.stages.back().blocks;
    store.add("merge.w", detail::init_weight<T>({1, 1, merged_in, prev}, merged_in, rng));
    store.add("merge.b", BasicTensor<T>({prev}));
    store.add("head.w", detail::init_weight<T>({prev, config.classes}, prev, rng));
    store.add("head.b", BasicTensor<T>({config.classes}));
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    std::mt19937_64 rng(seed);
    init_model_params(m.params, config, rng);
    return m;
}

template <typename T>
Var<T> positional_embed(Var<T> x, Binder<T>& p, const std::string& prefix, const ForwardOptions& how) {
    return gelu(rep_dw_forward(x, p, prefix, 1, rep_how(how)));
}

template <typename T>
Var<T> patch_embed(Var<T> x, Binder<T>& p, const std::string& prefix, const ForwardOptions& how) {
    if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
        throw ConfigError("patch_embed: map " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                          " has an odd side");
    auto y = rep_dw_forward(x, p, prefix + ".dw", 2, rep_how(how));
    return rep_pw_forward(y, p, prefix + ".pw", rep_how(how));
}

template <typename T>
Var<T> stem(Var<T> image, Binder<T>& p, const ModelConfig& config, const ForwardOptions& how) {
    if (image.value().rank() != 4 || image.dim(3) != config.in_channels)
        throw ConfigError("stem: expected N x H x W x " + std::to_string(config.in_channels) + " input, got " +
                          shape_str(image.shape()));
    if (image.dim(1) % config.stem_stride != 0 || image.dim(2) % config.stem_stride != 0)
        throw ConfigError("stem: input " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                          " is not divisible by stem stride " + std::to_string(config.stem_stride));
    Var<T> x = image;
    for (int pair = 0; pair < 2; ++pair) {
        const std::string s = "stem." + std::to_string(pair);
        x = rep_dw_forward(x, p, s + ".dw", stem_stride_of(config, pair), rep_how(how));
        x = gelu(rep_pw_forward(x, p, s + ".pw", rep_how(how)));
    }
    return x;
}

template <typename T>
Var<T> block_forward(Var<T> x, Binder<T>& p, const std::string& prefix, const CmsaConfig& attention,
                     const ForwardOptions& how) {
    auto x_pe = positional_embed(x, p, prefix + ".pe", how);
    auto normed = batch_norm(x_pe, p(prefix + ".norm1.gamma"), p(prefix + ".norm1.beta"),
                             p.raw(prefix + ".norm1.mean").value, p.raw(prefix + ".norm1.var").value,
                             {how.training, how.bn_momentum, kBnEpsilon});
    auto x_attn = add(cmsa_forward(normed, p, prefix + ".attn.", attention), x_pe);
    auto h = layer_norm(x_attn, p(prefix + ".norm2.gamma"), p(prefix + ".norm2.beta"));
    h = linear(gelu(linear(h, p(prefix + ".ffn.fc1.w"), p(prefix + ".ffn.fc1.b"))), p(prefix + ".ffn.fc2.w"),
               p(prefix + ".ffn.fc2.b"));
    return add(h, x_attn);
}

template <typename T>
Var<T> forward(Var<T> images, Binder<T>& p, const ModelConfig& config, const ForwardOptions& how) {
    if (images.value().rank() != 4 || images.dim(1) != config.image_height || images.dim(2) != config.image_width)
        throw ConfigError("forward: expected N x " + std::to_string(config.image_height) + " x " +
                          std::to_string(config.image_width) + " x " + std::to_string(config.in_channels) +
                          " images, got " + shape_str(images.shape()));
    Var<T> x = stem(images, p, config, how);
    std::vector<Var<T>> last;
    for (std::size_t i = 0; i < config.stages.size(); ++i) {
        const auto& st = config.stages[i];
        if (i > 0) x = patch_embed(x, p, "s" + std::to_string(i) + ".embed", how);
        for (int j = 0; j < st.blocks; ++j) {
            x = block_forward(x, p, block_prefix(static_cast<int>(i), j), st.attention, how);
            if (i + 1 == config.stages.size()) last.push_back(x);
        }
    }
    auto merged = last.size() == 1 ? last[0] : concat_last<T>(std::span<const Var<T>>(last));
    merged = conv2d(merged, p("merge.w"), p("merge.b"));
    return linear(global_avg_pool(merged), p("head.w"), p("head.b"));
}

std::int64_t parameter_count(const Model& model) { return model.params.learnable_count(); }

Model reparameterize(const Model& model) {
    if (model.mode == LayerMode::merged) return model;
    Model out;
    out.config = model.config;
    out.mode = LayerMode::merged;
    const auto dws = rep_dw_layers(model.config);
    const auto pws = rep_pw_layers(model.config);
    std::vector<std::string> done;
    auto owner = [&](const std::string& name) -> std::pair<std::string, int> {
        auto belongs = [&](const std::string& pre) {
            if (!name.starts_with(pre)) return false;
            const auto rest = name.substr(pre.size());
            return std::find(std::begin(kRepSuffixes), std::end(kRepSuffixes), rest) != std::end(kRepSuffixes);
        };
        for (const auto& [pre, stride] : dws)
            if (belongs(pre)) return {pre, stride};
        for (const auto& pre : pws)
            if (belongs(pre)) return {pre, 0};
        return {"", -1};
    };
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& prm = model.params[i];
        const auto [pre, stride] = owner(prm.name);
        if (stride < 0) {
            auto& added = out.params.add(prm.name, prm.value, prm.trainable);
            added.grad = BasicTensor<float>();
            continue;
        }
        if (std::find(done.begin(), done.end(), pre) != done.end()) continue;
        done.push_back(pre);
        if (stride == 0)
            merge_rep_pw(model.params, pre, out.params);
        else
            merge_rep_dw(model.params, pre, stride, out.params);
    }
    return out;
}

double verify_equivalence(const Model& a, const Model& b, int trials, const Shape& input_shape, std::uint64_t seed) {
    if (!(a.config == b.config)) throw UsageError("verify_equivalence: models have different configurations");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto pa = a.params, pb = b.params;
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        Tensor x(input_shape);
        for (auto& v : x.data()) v = static_cast<float>(nd(rng));
        Graph<float> ga, gb;
        Binder<float> ba(ga, pa), bb(gb, pb);
        const auto ya = forward(ga.constant(x), ba, a.config, {a.mode, false});
        const auto yb = forward(gb.constant(x), bb, b.config, {b.mode, false});
        worst = std::max(worst, max_abs_diff(ya.value(), yb.value()));
    }
    return worst;
}

void calibrate_batch_norms(Model& model, const Tensor& images) {
    Graph<float> g;
    Binder<float> p(g, model.params);
    forward(g.constant(images), p, model.config, {model.mode, true, 1.0});
}

template <typename T>
void randomize_batch_norms(ParamStore<T>& store, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> pos(0.5, 2.0);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& prm = store[i];
        const auto& n = prm.name;
        if (!n.ends_with(".mean")) continue;
        const auto base = n.substr(0, n.size() - 5);
        for (auto& v : prm.value.data()) v = static_cast<T>(nd(rng));
        for (auto& v : store.get(base + ".var").value.data()) v = static_cast<T>(pos(rng));
        for (auto& v : store.get(base + ".gamma").value.data()) v = static_cast<T>(pos(rng));
        for (auto& v : store.get(base + ".beta").value.data()) v = static_cast<T>(nd(rng));
    }
}

template <typename T>
void randomize_branches(ParamStore<T>& store, std::mt19937_64& rng) {
    randomize_batch_norms(store, rng);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& prm = store[i];
        const auto& n = prm.name;
        if (n.ends_with(".scale.w") || n.ends_with(".scale.b") || n.ends_with(".dw.b") || n.ends_with(".conv.b"))
            for (auto& v : prm.value.data()) v = static_cast<T>(nd(rng) + (n.ends_with(".scale.w") ? 1.0 : 0.0));
    }
}

#define CMSA_INSTANTIATE_NETWORK(T)                                                                                  \
    template void init_model_params(ParamStore<T>&, const ModelConfig&, std::mt19937_64&);                           \
    template void init_block_params(ParamStore<T>&, const std::string&, int, const CmsaConfig&, int, std::mt19937_64&); \
    template Var<T> positional_embed(Var<T>, Binder<T>&, const std::string&, const ForwardOptions&);                 \
    template Var<T> patch_embed(Var<T>, Binder<T>&, const std::string&, const ForwardOptions&);                      \
    template Var<T> stem(Var<T>, Binder<T>&, const ModelConfig&, const ForwardOptions&);                             \
    template Var<T> block_forward(Var<T>, Binder<T>&, const std::string&, const CmsaConfig&, const ForwardOptions&); \
    template Var<T> forward(Var<T>, Binder<T>&, const ModelConfig&, const ForwardOptions&);                          \
    template void randomize_batch_norms(ParamStore<T>&, std::mt19937_64&);                                            \
    template void randomize_branches(ParamStore<T>&, std::mt19937_64&);

CMSA_INSTANTIATE_NETWORK(float)
CMSA_INSTANTIATE_NETWORK(double)

}  // namespace cmsa
