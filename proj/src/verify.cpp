#include "cmsa/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "cmsa/config.hpp"
#include "cmsa/network.hpp"
#include "cmsa/ops.hpp"
#include "cmsa/reference.hpp"
#include "cmsa/window.hpp"

namespace cmsa {

namespace {

using reference::random_tensor;

CheckResult finish(std::string name, double value, double tolerance, std::string detail) {
    return {std::move(name), value < tolerance, value, tolerance, std::move(detail)};
}

struct BranchedAndMerged {
    Model train, merged;
};

BranchedAndMerged perturbed_model(const std::string& variant, std::uint64_t seed, bool calibrate) {
    BranchedAndMerged out{build_model(variant_config(variant), seed), {}};
    std::mt19937_64 rng(seed + 1);
    randomize_branches(out.train.params, rng);
    if (calibrate)
        calibrate_batch_norms(out.train, random_tensor<float>({16, out.train.config.image_height,
                                                           out.train.config.image_width, out.train.config.in_channels},
                                                          rng));
    out.merged = reparameterize(out.train);
    return out;
}

using LayerFn = std::function<Var<float>(Var<float>, Binder<float>&, const ForwardOptions&)>;

double layer_diff(BranchedAndMerged& m, const Tensor& x, const LayerFn& layer) {
    Graph<float> ga, gb;
    Binder<float> ba(ga, m.train.params), bb(gb, m.merged.params);
    const auto ya = layer(ga.constant(x), ba, ForwardOptions{LayerMode::training, false});
    const auto yb = layer(gb.constant(x), bb, ForwardOptions{LayerMode::merged, false});
    return max_abs_diff(ya.value(), yb.value());
}

GradCheckReport check64(const GraphBuilder<double>& fn, std::vector<BasicTensor<double>> inputs, std::uint64_t seed) {
    GradCheckOptions o;
    o.eps = 1e-3;
    o.samples_per_tensor = 12;
    o.abs_floor = 1e-6;
    o.seed = seed;
    return grad_check<double>(fn, std::move(inputs), o);
}

template <typename T>
struct Unit {
    static inline const std::string prefix = "attn.";
    ParamStore<T> store;
    CmsaConfig cfg;

    Unit(int channels, CmsaConfig config, std::mt19937_64& rng) : cfg(std::move(config)) {
        init_cmsa_params(store, prefix, channels, cfg, rng);
        std::normal_distribution<double> nd(0.0, 0.1);
        for (std::size_t i = 0; i < store.size(); ++i)
            if (store[i].name.ends_with(".b"))
                for (auto& v : store[i].value.data()) v = static_cast<T>(nd(rng));
    }

    BasicTensor<T> run(const BasicTensor<T>& x, std::vector<BasicTensor<T>>* streams = nullptr) {
        Graph<T> g;
        Binder<T> p(g, store);
        std::vector<Var<T>> s;
        auto y = cmsa_forward(g.constant(x), p, prefix, cfg, &s);
        if (streams)
            for (auto v : s) streams->push_back(v.value());
        return y.value();
    }

    const BasicTensor<T>& w(const std::string& name) const { return store.get(prefix + name).value; }
};

template <typename T>
GradCheckReport run_block_check(ParamStore<T>& store, const BasicTensor<T>& x, const GradCheckOptions& o,
                                bool input_checked) {
    const auto attn = toy_block_attention();
    std::vector<Parameter<T>*> params;
    for (std::size_t i = 0; i < store.size(); ++i)
        if (store[i].trainable) params.push_back(&store[i]);
    auto fn = [&](Graph<T>& g, std::span<const Var<T>> in) {
        Binder<T> p(g, store);
        return block_forward(input_checked ? in[0] : g.constant(x), p, "blk", attn, {LayerMode::training, false});
    };
    std::vector<BasicTensor<T>> inputs;
    if (input_checked) inputs.push_back(x);
    return grad_check<T>(fn, std::move(inputs), o, params);
}

}  // namespace

CheckResult check_parameter_counts() {
    const std::pair<const char*, double> targets[] = {{"S", 4.2e6}, {"B", 5.7e6}, {"L", 7.4e6}};
    double worst = 0.0;
    std::ostringstream os;
    for (const auto& [v, target] : targets) {
        const auto model = build_model(variant_config(v), 1);
        const auto train = parameter_count(model);
        const auto merged = parameter_count(reparameterize(model));
        for (auto n : {train, merged}) worst = std::max(worst, std::abs(static_cast<double>(n) - target) / target);
        os << v << "=" << merged << "/" << train << " ";
    }
    os << "(merged/training)";
    return finish("parameter_counts", worst, 0.1, os.str());
}

CheckResult check_reparam_layers(const std::string& variant, int inputs, std::uint64_t seed) {
    auto m = perturbed_model(variant, seed, false);
    const auto& cfg = m.train.config;
    std::mt19937_64 rng(seed + 2);
    double worst = 0.0;
    std::string where;
    auto record = [&](double d, const std::string& name) {
        if (d >= worst) {
            worst = d;
            where = name;
        }
    };
    const auto& params = m.train.params;
    for (const auto& [prefix, stride] : rep_dw_layers(cfg)) {
        const auto c = params.get(prefix + ".dw.w").value.dim(3);
        record(layer_diff(m, random_tensor<float>({inputs, 16, 16, c}, rng),
                          [&, &prefix = prefix, stride = stride](Var<float> x, Binder<float>& p, const ForwardOptions& how) {
                              return rep_dw_forward(x, p, prefix, stride, {how.mode, how.training, how.bn_momentum});
                          }),
               prefix);
    }
    for (const auto& prefix : rep_pw_layers(cfg)) {
        const auto c = params.get(prefix + ".conv.w").value.dim(2);
        record(layer_diff(m, random_tensor<float>({inputs, 8, 8, c}, rng),
                          [&](Var<float> x, Binder<float>& p, const ForwardOptions& how) {
                              return rep_pw_forward(x, p, prefix, {how.mode, how.training, how.bn_momentum});
                          }),
               prefix);
    }
    return finish("reparam_layers", worst, 1e-5,
                  variant + " inputs=" + std::to_string(inputs) + " worst_layer=" + where);
}

CheckResult check_reparam_end_to_end(const std::string& variant, int inputs, std::uint64_t seed) {
    auto m = perturbed_model(variant, seed, true);
    const auto& c = m.train.config;
    const double d = verify_equivalence(m.train, m.merged, inputs, {1, c.image_height, c.image_width, c.in_channels},
                                        seed + 3);
    return finish("reparam_end_to_end", d, 1e-4, variant + " inputs=" + std::to_string(inputs));
}

CheckResult check_primitive_gradients(std::uint64_t seed) {
    using Vars = std::span<const Var<double>>;
    using T64 = BasicTensor<double>;
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    std::string where;
    auto run = [&](const char* name, const GraphBuilder<double>& fn, std::vector<T64> inputs) {
        const auto r = check64(fn, std::move(inputs), rng());
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            where = std::string(name) + " " + r.worst;
        }
    };
    const std::int64_t n = 2, h = 4, w = 6, c = 3;
    const Shape map{n, h, w, c};
    run("conv2d", [](Graph<double>&, Vars in) { return conv2d(in[0], in[1], in[2], {1, 1, 1}); },
        {random_tensor<double>(map, rng), random_tensor<double>({3, 3, c, 4}, rng), random_tensor<double>({4}, rng)});
    run("conv2d_depthwise_stride2", [](Graph<double>&, Vars in) { return conv2d(in[0], in[1], in[2], {2, 1, 3}); },
        {random_tensor<double>(map, rng), random_tensor<double>({3, 3, 1, c}, rng), random_tensor<double>({c}, rng)});
    run("linear", [](Graph<double>&, Vars in) { return linear(in[0], in[1], in[2]); },
        {random_tensor<double>(map, rng), random_tensor<double>({c, 5}, rng), random_tensor<double>({5}, rng)});
    run("softmax_last", [](Graph<double>&, Vars in) { return softmax_last(in[0]); }, {random_tensor<double>(map, rng)});
    run("gelu", [](Graph<double>&, Vars in) { return gelu(in[0]); }, {random_tensor<double>(map, rng)});
    run("batch_norm_batch",
        [](Graph<double>&, Vars in) {
            T64 rm({c}), rv({c}, 1.0);
            return batch_norm(in[0], in[1], in[2], rm, rv, {true, 0.1, 1e-5});
        },
        {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)});
    run("batch_norm_running",
        [](Graph<double>&, Vars in) {
            T64 rm({c}, 0.3), rv({c}, 2.0);
            return batch_norm(in[0], in[1], in[2], rm, rv, {false, 0.1, 1e-5});
        },
        {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)});
    run("layer_norm", [](Graph<double>&, Vars in) { return layer_norm(in[0], in[1], in[2], 1e-6); },
        {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)});
    run("avg_pool2d", [](Graph<double>&, Vars in) { return avg_pool2d(in[0]); }, {random_tensor<double>(map, rng)});
    run("global_avg_pool", [](Graph<double>&, Vars in) { return global_avg_pool(in[0]); },
        {random_tensor<double>(map, rng)});
    run("add_sub_mul", [](Graph<double>&, Vars in) { return mul(add(in[0], in[1]), sub(in[0], in[1])); },
        {random_tensor<double>(map, rng), random_tensor<double>(map, rng)});
    run("scale", [](Graph<double>&, Vars in) { return scale(in[0], -1.5); }, {random_tensor<double>(map, rng)});
    run("slice_concat", [](Graph<double>&, Vars in) { return concat_last({slice_last(in[0], 1, 2), in[0]}); },
        {random_tensor<double>(map, rng)});
    run("window_partition_reverse",
        [](Graph<double>&, Vars in) {
            return window_reverse(scale(window_partition(in[0], 2, 3), 1.5), n, h, w, 2, 3);
        },
        {random_tensor<double>(map, rng)});
    run("attention_core", [](Graph<double>&, Vars in) { return attention_core(in[0], in[1], in[2], 2); },
        {random_tensor<double>({n, 6, 4}, rng), random_tensor<double>({n, 3, 4}, rng),
         random_tensor<double>({n, 3, 6}, rng)});
    run("mh_window_attention",
        [](Graph<double>&, Vars in) { return mh_window_attention(in[0], in[1], in[2], 2, 4, 2); },
        {random_tensor<double>({1, 4, 8, 4}, rng), random_tensor<double>({1, 2, 4, 4}, rng),
         random_tensor<double>({1, 2, 4, 8}, rng)});
    const std::vector<int> labels{1, 4};
    run("cross_entropy_smoothed",
        [labels](Graph<double>&, Vars in) { return cross_entropy_smoothed(in[0], std::span<const int>(labels), 0.1); },
        {random_tensor<double>({n, 5}, rng)});
    run("sum", [](Graph<double>&, Vars in) { return sum(in[0]); }, {random_tensor<double>(map, rng)});
    return finish("primitive_gradients", worst, 1e-3, "64-bit worst=" + where);
}

CmsaConfig toy_block_attention() {
    CmsaConfig c;
    c.groups = {{8, 6, 16, 2}, {4, 2, 16, 2}};
    c.kv_halved = true;
    c.value_double = true;
    return c;
}

GradCheckReport block_gradient_check(std::uint64_t seed) {
    const auto attn = toy_block_attention();
    ParamStore<float> store;
    std::mt19937_64 rng(seed);
    init_block_params(store, "blk", 32, attn, 4, rng);
    const auto x = random_tensor<float>({1, 8, 6, 32}, rng);
    auto shadow = store.cast<double>();
    std::vector<Parameter<float>*> params;
    std::vector<Parameter<double>*> shadow_params;
    for (std::size_t i = 0; i < store.size(); ++i)
        if (store[i].trainable) {
            params.push_back(&store[i]);
            shadow_params.push_back(&shadow[i]);
        }
    const auto xd = x.cast<double>();
    GradCheckOptions o;
    o.eps = 1e-3;
    o.samples_total = 5;
    o.seed = seed + 1;
    return grad_check_shadowed(
        [&](Graph<float>& g, std::span<const Var<float>>) {
            Binder<float> p(g, store);
            return block_forward(g.constant(x), p, "blk", attn, {LayerMode::training, false});
        },
        [&](Graph<double>& g, std::span<const Var<double>>) {
            Binder<double> p(g, shadow);
            return block_forward(g.constant(xd), p, "blk", attn, {LayerMode::training, false});
        },
        {}, o, params, shadow_params);
}

GradCheckReport block_gradient_check_shadow(std::uint64_t seed) {
    ParamStore<float> store;
    std::mt19937_64 rng(seed);
    init_block_params(store, "blk", 32, toy_block_attention(), 4, rng);
    const auto x = random_tensor<float>({1, 8, 6, 32}, rng);
    auto shadow = store.cast<double>();
    GradCheckOptions o;
    o.eps = 1e-3;
    o.samples_per_tensor = 3;
    o.abs_floor = 1e-3;
    o.seed = seed + 1;
    return run_block_check(shadow, x.cast<double>(), o, true);
}

CheckResult check_block_gradients(std::uint64_t seed) {
    const auto r = block_gradient_check(seed);
    return finish("block_gradients", r.max_rel_error, 1e-2,
                  "32-bit 1x8x6x32 coords=" + std::to_string(r.coordinates) + " worst=" + r.worst);
}

CheckResult check_dense_attention_oracle(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int heads : {1, 2, 4}) {
        CmsaConfig cfg;
        cfg.groups = {{4, 4, 8, heads}};
        Unit<float> u(8, cfg, rng);
        identity_init_spatial_fusion(u.store, Unit<float>::prefix, 1);
        const Tensor* none = nullptr;
        for (int trial = 0; trial < 4; ++trial) {
            const auto x = random_tensor<float>({1, 4, 4, 8}, rng);
            const auto q = reference::conv2d_oracle(x, u.w("q.w"), none, 1, 0, 1);
            const auto k = reference::gelu_oracle(reference::conv2d_oracle(x, u.w("k.w"), none, 1, 0, 1));
            const auto v = reference::gelu_oracle(reference::conv2d_oracle(x, u.w("v.w"), none, 1, 0, 1));
            const auto expect = reference::linear_oracle(reference::dense_attention_oracle(q, k, v, heads), u.w("out.w"),
                                                         &u.w("out.b"));
            worst = std::max(worst, max_abs_diff(u.run(x), expect));
        }
    }
    return finish("dense_attention_oracle", worst, 1e-5, "n=1 global window, heads 1/2/4, 1x4x4x8");
}

CheckResult check_window_attention_oracle(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    struct Case {
        int h, w, d, s, t, heads;
        bool halved;
    };
    double worst = 0.0;
    for (Case c : {Case{4, 4, 4, 2, 2, 2, false}, Case{8, 8, 8, 4, 4, 2, false}, Case{8, 8, 8, 8, 8, 4, false},
                   Case{8, 8, 8, 4, 2, 1, true}, Case{8, 6, 8, 4, 6, 2, true}, Case{8, 8, 8, 2, 2, 2, true},
                   Case{8, 8, 8, 1, 1, 1, false}}) {
        const int hk = c.halved ? c.h / 2 : c.h, wk = c.halved ? c.w / 2 : c.w;
        const auto q = random_tensor<float>({1, c.h, c.w, c.d}, rng);
        const auto k = random_tensor<float>({1, hk, wk, c.d}, rng);
        const auto v = random_tensor<float>({1, hk, wk, 2 * c.d}, rng);
        Graph<float> g;
        const auto out = mh_window_attention(g.constant(q), g.constant(k), g.constant(v), c.s, c.t, c.heads).value();
        worst = std::max(worst, max_abs_diff(out, reference::window_attention_oracle(q, k, v, c.s, c.t, c.heads)));
    }
    return finish("window_attention_oracle", worst, 1e-5, "maps up to 1x8x8x8");
}

CheckResult check_window_round_trip(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> f(1, 3);
    int mismatches = 0;
    const int trials = 50;
    for (int trial = 0; trial < trials; ++trial) {
        const int s = f(rng), t = f(rng);
        const int h = s * f(rng), w = t * f(rng), n = f(rng), c = f(rng);
        const auto x = random_tensor<float>({n, h, w, c}, rng);
        Graph<float> g;
        if (!(window_reverse(window_partition(g.constant(x), s, t), n, h, w, s, t).value() == x)) ++mismatches;
    }
    return finish("window_round_trip", mismatches, 0.5,
                  "mismatching shapes=" + std::to_string(mismatches) + "/" + std::to_string(trials));
}

CheckResult check_cascade_causality(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    CmsaConfig cfg;
    cfg.groups = {{8, 8, 8, 2}, {4, 4, 8, 2}, {2, 2, 8, 2}};
    cfg.kv_halved = true;
    cfg.value_double = true;
    const auto x = random_tensor<float>({1, 8, 8, 16}, rng);
    int violations = 0, inert = 0;
    for (int k = 1; k <= 3; ++k) {
        std::mt19937_64 init(seed + 1);
        Unit<float> u(16, cfg, init);
        std::vector<Tensor> before, after;
        u.run(x, &before);
        const std::string g = Unit<float>::prefix + "g" + std::to_string(k) + ".";
        for (std::size_t i = 0; i < u.store.size(); ++i)
            if (u.store[i].name.starts_with(g))
                for (auto& v : u.store[i].value.data()) v += 0.05f;
        u.run(x, &after);
        for (int j = 1; j <= 3; ++j) {
            const auto& b = before[static_cast<std::size_t>(j - 1)];
            const auto& a = after[static_cast<std::size_t>(j - 1)];
            if (j < k && !(a == b)) ++violations;
            if (j >= k && max_abs_diff(a, b) <= 1e-4) ++inert;
        }
    }
    return finish("cascade_causality", violations + inert, 0.5,
                  "earlier streams changed=" + std::to_string(violations) +
                      " later streams unchanged=" + std::to_string(inert));
}

CheckResult check_shape_preservation(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    int wrong = 0, stages = 0;
    for (const char* v : {"S", "B", "L"}) {
        const auto cfg = variant_config(v, 128, 96, 100, 4);
        for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
            const auto [h, w] = cfg.stage_size(static_cast<int>(i));
            const int c = cfg.stages[i].channels;
            Unit<float> u(c, cfg.stages[i].attention, rng);
            const auto y = u.run(random_tensor<float>({1, h, w, c}, rng));
            ++stages;
            if (!(y.shape() == Shape{1, h, w, c}) || !y.all_finite()) ++wrong;
        }
    }
    return finish("shape_preservation", wrong, 0.5,
                  "stage configs=" + std::to_string(stages) + " wrong=" + std::to_string(wrong));
}

std::string format_check(const CheckResult& r) {
    std::ostringstream os;
    os << (r.pass ? "PASS " : "FAIL ") << r.name << " value=" << r.value << " tol=" << r.tolerance;
    if (!r.detail.empty()) os << ' ' << r.detail;
    return os.str();
}

std::string format_record(const CheckResult& r) {
    std::ostringstream os;
    os << "check=" << r.name << " value=" << r.value << " threshold=" << r.tolerance
       << " verdict=" << (r.pass ? "pass" : "fail") << " detail=\"";
    for (char c : r.detail) os << (c == '"' ? '\'' : c);
    os << '"';
    return os.str();
}

}  // namespace cmsa
