#include <random>

#include "cmsa/cmsa.hpp"
#include "cmsa/errors.hpp"
#include "cmsa/grad_check.hpp"
#include "cmsa/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cmsa;
using namespace cmsa::testing;

namespace {

const std::string kPrefix = "attn.";

template <typename T = float>
struct Unit {
    ParamStore<T> store;
    CmsaConfig cfg;
    int channels;

    Unit(int c, CmsaConfig config, std::uint64_t seed = 7) : cfg(std::move(config)), channels(c) {
        std::mt19937_64 rng(seed);
        init_cmsa_params(store, kPrefix, c, cfg, rng);
        // nonzero biases so the oracle comparisons exercise every term
        for (std::size_t i = 0; i < store.size(); ++i)
            if (store[i].name.ends_with(".b"))
                for (auto& v : store[i].value.data()) v = static_cast<T>(std::normal_distribution<double>(0, 0.1)(rng));
    }

    BasicTensor<T> run(const BasicTensor<T>& x, std::vector<BasicTensor<T>>* streams = nullptr) {
        Graph<T> g;
        Binder<T> p(g, store);
        std::vector<Var<T>> s;
        auto y = cmsa_forward(g.constant(x), p, kPrefix, cfg, &s);
        if (streams)
            for (auto v : s) streams->push_back(v.value());
        return y.value();
    }

    const BasicTensor<T>& w(const std::string& name) const { return store.get(kPrefix + name).value; }
    const BasicTensor<T>* wp(const std::string& name) const { return &store.get(kPrefix + name).value; }
};

CmsaConfig make_config(std::vector<GroupSpec> groups, bool kv_halved, bool value_double, int row = 5) {
    CmsaConfig c;
    c.groups = std::move(groups);
    c.kv_halved = kv_halved;
    c.value_double = value_double;
    c.ablation = AblationFlags::table_row(row);
    return c;
}

/// Composition of loop oracles for one group's stream.
template <typename T>
BasicTensor<T> group_oracle(const Unit<T>& u, int k, const BasicTensor<T>& q, const BasicTensor<T>& key,
                            const BasicTensor<T>& val, const BasicTensor<T>* prev) {
    const auto& cfg = u.cfg;
    const auto& spec = cfg.groups[static_cast<std::size_t>(k - 1)];
    const std::string g = "g" + std::to_string(k) + ".";
    std::vector<BasicTensor<T>> parts{key, val};
    if (prev && cfg.ablation.cascade) parts.push_back(*prev);
    auto cat = concat_oracle(parts);
    if (k > 1 && cfg.ablation.channel_fusion) cat = conv2d_oracle(cat, u.w(g + "cf.w"), u.wp(g + "cf.b"), 1, 0, 1);
    if (cfg.ablation.spatial_fusion) {
        const int cc = static_cast<int>(cat.dim(3));
        cat = gelu_oracle(conv2d_oracle(cat, u.w(g + "sf.dw.w"), u.wp(g + "sf.dw.b"), 1, 1, cc));
    }
    auto h = conv2d_oracle(cat, u.w(g + "sf.pw.w"), u.wp(g + "sf.pw.b"), 1, 0, 1);
    if (cfg.kv_halved) h = avg_pool_oracle(h);
    const int dv = cfg.value_width(k);
    return window_attention_oracle(q, slice_oracle(h, 0, spec.d), slice_oracle(h, spec.d, dv), spec.s, spec.t,
                                   spec.heads);
}

template <typename T>
BasicTensor<T> unit_oracle(const Unit<T>& u, const BasicTensor<T>& x) {
    const auto q = conv2d_oracle(x, u.w("q.w"), static_cast<const BasicTensor<T>*>(nullptr), 1, 0, 1);
    const auto k = conv2d_oracle(x, u.w("k.w"), static_cast<const BasicTensor<T>*>(nullptr), 1, 0, 1);
    const auto v = conv2d_oracle(x, u.w("v.w"), static_cast<const BasicTensor<T>*>(nullptr), 1, 0, 1);
    BasicTensor<T> mixed;
    if (!u.cfg.ablation.grouped_attention) {
        mixed = dense_attention_oracle(q, k, v, u.cfg.heads_total());
    } else {
        std::vector<BasicTensor<T>> outs;
        std::int64_t start = 0;
        for (int i = 1; i <= u.cfg.group_count(); ++i) {
            const int d = u.cfg.groups[static_cast<std::size_t>(i - 1)].d;
            outs.push_back(group_oracle(u, i, slice_oracle(q, start, d), slice_oracle(k, start, d),
                                        slice_oracle(v, start, d), outs.empty() ? nullptr : &outs.back()));
            start += d;
        }
        mixed = concat_oracle(outs);
    }
    return linear_oracle(mixed, u.w("out.w"), u.wp("out.b"));
}

}  // namespace

TEST_CASE("ablation rows map to flag sets and back") {
    CHECK(AblationFlags::table_row(1) == AblationFlags{false, false, false, false});
    CHECK(AblationFlags::table_row(5) == AblationFlags{});
    for (int r = 1; r <= 5; ++r) CHECK(AblationFlags::table_row(r).row() == r);
    CHECK(AblationFlags{true, false, true, false}.row() == 0);
    CHECK_THROWS_AS(AblationFlags::table_row(6), ConfigError);
}

TEST_CASE("config validation") {
    auto c = make_config({{8, 6, 16, 2}, {4, 3, 16, 2}}, false, true);
    CHECK_NOTHROW(c.validate(8, 6));
    CHECK(c.inner_width() == 32);
    CHECK(c.output_width() == 64);
    CHECK(c.fusion_width(1) == 32);
    CHECK(c.fusion_width(2) == 32 + 32);
    CHECK_THROWS_WITH_AS(c.validate(16, 12), doctest::Contains("first group must be global"), ConfigError);
    auto bad = make_config({{8, 6, 16, 2}, {3, 3, 16, 2}}, false, false);
    CHECK_THROWS_WITH_AS(bad.validate(8, 6), doctest::Contains("window does not tile stage"), ConfigError);
    auto heads = make_config({{8, 6, 15, 2}}, false, false);
    CHECK_THROWS_AS(heads.validate(8, 6), ConfigError);
    auto odd = make_config({{8, 6, 16, 2}, {4, 3, 16, 2}}, true, false);
    CHECK_THROWS_WITH_AS(odd.validate(8, 6), doctest::Contains("kv_halved"), ConfigError);
    auto shifted = c;
    shifted.shifted_windows = true;
    CHECK_THROWS_AS(shifted.validate(8, 6), ConfigError);
    CHECK_THROWS_AS(make_config({}, false, false).validate(8, 6), ConfigError);
}

TEST_CASE("qkv_project: identity, zero and random kernels") {
    std::mt19937_64 rng(1);
    auto cfg = make_config({{4, 4, 8, 2}}, false, false);
    Unit<float> u(8, cfg);
    const auto x = random_tensor({2, 4, 4, 8}, rng);
    {
        Graph<float> g;
        Binder<float> p(g, u.store);
        auto qkv = qkv_project(g.constant(x), p, kPrefix, cfg);
        for (const char* n : {"q.w", "k.w", "v.w"}) {
            const auto expect = conv2d_oracle(x, u.w(n), static_cast<const Tensor*>(nullptr), 1, 0, 1);
            const auto& got = n[0] == 'q' ? qkv.q.value() : n[0] == 'k' ? qkv.k.value() : qkv.v.value();
            CHECK(max_abs_diff(got, expect) < 1e-6);
        }
    }
    for (const char* n : {"q.w", "k.w", "v.w"}) set_pointwise_identity(u.store.get(kPrefix + n).value);
    {
        Graph<float> g;
        Binder<float> p(g, u.store);
        auto qkv = qkv_project(g.constant(x), p, kPrefix, cfg);
        CHECK(qkv.q.value() == x);
        CHECK(qkv.k.value() == x);
        CHECK(qkv.v.value() == x);
    }
    for (const char* n : {"q.w", "k.w", "v.w"})
        for (auto& v : u.store.get(kPrefix + n).value.data()) v = 0.f;
    Graph<float> g;
    Binder<float> p(g, u.store);
    auto qkv = qkv_project(g.constant(x), p, kPrefix, cfg);
    for (auto v : {qkv.q, qkv.k, qkv.v})
        for (float e : v.value().data()) CHECK(e == 0.f);
}

TEST_CASE("split_groups: slicing arithmetic and round trip") {
    std::mt19937_64 rng(2);
    Graph<float> g;
    auto a = g.constant(random_tensor({1, 2, 2, 4}, rng));
    auto b = g.constant(random_tensor({1, 2, 2, 4}, rng));
    auto c = g.constant(random_tensor({1, 2, 2, 4}, rng));
    auto two = make_config({{2, 2, 2, 1}, {1, 1, 2, 1}}, false, false);
    auto parts = split_groups(Qkv<float>{a, b, c}, two);
    REQUIRE(parts.size() == 2);
    CHECK(parts[0].q.value() == slice_oracle(a.value(), 0, 2));
    CHECK(parts[1].q.value() == slice_oracle(a.value(), 2, 2));
    CHECK(parts[1].v.value() == slice_oracle(c.value(), 2, 2));
    CHECK(concat_last({parts[0].k, parts[1].k}).value() == b.value());
    auto one = make_config({{2, 2, 4, 1}}, false, false);
    auto same = split_groups(Qkv<float>{a, b, c}, one);
    CHECK(same.size() == 1);
    CHECK(same[0].q.id == a.id);
    auto wrong = make_config({{2, 2, 2, 1}}, false, false);
    CHECK_THROWS_AS(split_groups(Qkv<float>{a, b, c}, wrong), ConfigError);
}

TEST_CASE("channel_fusion: identity, channel averaging, random oracle, group 1 rejected") {
    std::mt19937_64 rng(3);
    auto cfg = make_config({{4, 4, 2, 1}, {2, 2, 2, 1}}, false, false);
    Unit<float> u(4, cfg);
    REQUIRE(cfg.fusion_width(2) == 6);
    const auto x = random_tensor({1, 4, 4, 6}, rng);
    {
        Graph<float> g;
        Binder<float> p(g, u.store);
        const auto expect = conv2d_oracle(x, u.w("g2.cf.w"), u.wp("g2.cf.b"), 1, 0, 1);
        CHECK(max_abs_diff(channel_fusion(g.constant(x), p, kPrefix, 2).value(), expect) < 1e-6);
        CHECK_THROWS_AS(channel_fusion(g.constant(x), p, kPrefix, 1), UsageError);
    }
    auto& w = u.store.get(kPrefix + "g2.cf.w").value;
    for (auto& v : u.store.get(kPrefix + "g2.cf.b").value.data()) v = 0.f;
    set_pointwise_identity(w);
    {
        Graph<float> g;
        Binder<float> p(g, u.store);
        CHECK(channel_fusion(g.constant(x), p, kPrefix, 2).value() == x);
    }
    // channels 0 and 1 hold the same map; output 0 averages them
    auto dup = x;
    for (std::int64_t i = 0; i < dup.numel() / 6; ++i) dup[i * 6 + 1] = dup[i * 6];
    for (auto& v : w.data()) v = 0.f;
    w[0 * 6 + 0] = 0.5f;
    w[1 * 6 + 0] = 0.5f;
    Graph<float> g;
    Binder<float> p(g, u.store);
    auto y = channel_fusion(g.constant(dup), p, kPrefix, 2).value();
    for (std::int64_t i = 0; i < y.numel() / 6; ++i) CHECK(y[i * 6] == doctest::Approx(dup[i * 6]));
}

TEST_CASE("spatial_fusion: identity form yields GeLU slices") {
    std::mt19937_64 rng(4);
    auto cfg = make_config({{4, 4, 4, 1}}, false, false);
    Unit<float> u(4, cfg);
    identity_init_spatial_fusion(u.store, kPrefix, 1);
    const auto x = random_tensor({1, 4, 4, 8}, rng);
    Graph<float> g;
    Binder<float> p(g, u.store);
    auto kv = spatial_fusion(g.constant(x), p, kPrefix, 1, cfg);
    const auto gx = gelu_oracle(x);
    CHECK(max_abs_diff(kv.k.value(), slice_oracle(gx, 0, 4)) < 1e-6);
    CHECK(max_abs_diff(kv.v.value(), slice_oracle(gx, 4, 4)) < 1e-6);
}

TEST_CASE("spatial_fusion: constant input gives a constant interior") {
    auto cfg = make_config({{6, 6, 4, 1}}, false, true);
    Unit<float> u(4, cfg);
    Graph<float> g;
    Binder<float> p(g, u.store);
    auto kv = spatial_fusion(g.constant(Tensor({1, 6, 6, 8}, 0.7f)), p, kPrefix, 1, cfg);
    for (auto v : {kv.k, kv.v}) {
        const auto& t = v.value();
        const auto c = t.dim(3);
        for (std::int64_t i = 1; i < 5; ++i)
            for (std::int64_t j = 1; j < 5; ++j)
                for (std::int64_t ch = 0; ch < c; ++ch) CHECK(t.at({0, i, j, ch}) == doctest::Approx(t.at({0, 1, 1, ch})));
    }
    CHECK(kv.v.dim(3) == 8);
}

TEST_CASE("spatial_fusion: random input vs composed oracle, with and without pooling") {
    std::mt19937_64 rng(5);
    for (bool halved : {false, true})
        for (bool doubled : {false, true}) {
            auto cfg = make_config({{4, 4, 4, 1}}, halved, doubled);
            Unit<float> u(4, cfg);
            const auto x = random_tensor({2, 4, 4, 8}, rng);
            Graph<float> g;
            Binder<float> p(g, u.store);
            auto kv = spatial_fusion(g.constant(x), p, kPrefix, 1, cfg);
            auto h = conv2d_oracle(gelu_oracle(conv2d_oracle(x, u.w("g1.sf.dw.w"), u.wp("g1.sf.dw.b"), 1, 1, 8)),
                                   u.w("g1.sf.pw.w"), u.wp("g1.sf.pw.b"), 1, 0, 1);
            if (halved) h = avg_pool_oracle(h);
            CHECK(max_abs_diff(kv.k.value(), slice_oracle(h, 0, 4)) < 1e-5);
            CHECK(max_abs_diff(kv.v.value(), slice_oracle(h, 4, doubled ? 8 : 4)) < 1e-5);
            CHECK(kv.k.dim(1) == (halved ? 2 : 4));
        }
    auto cfg = make_config({{3, 3, 4, 1}}, true, false);
    Unit<float> u(4, make_config({{4, 4, 4, 1}}, true, false));
    Graph<float> g;
    Binder<float> p(g, u.store);
    CHECK_THROWS_AS(spatial_fusion(g.constant(Tensor({1, 3, 3, 8})), p, kPrefix, 1, cfg), ConfigError);
}

TEST_CASE("cascade_step: single token map returns V'") {
    std::mt19937_64 rng(6);
    auto cfg = make_config({{1, 1, 4, 2}}, false, false);
    Unit<float> u(4, cfg);
    Graph<float> g;
    Binder<float> p(g, u.store);
    Qkv<float> in{g.constant(random_tensor({1, 1, 1, 4}, rng)), g.constant(random_tensor({1, 1, 1, 4}, rng)),
                  g.constant(random_tensor({1, 1, 1, 4}, rng))};
    auto x1 = cascade_step<float>(1, in, std::nullopt, p, kPrefix, cfg);
    auto kv = spatial_fusion(concat_last({in.k, in.v}), p, kPrefix, 1, cfg);
    CHECK(max_abs_diff(x1.value(), kv.v.value()) < 1e-6);
    CHECK_THROWS_AS(cascade_step<float>(1, in, x1, p, kPrefix, cfg), UsageError);
}

TEST_CASE("cascade_step: group 2 vs hand-rolled oracle; cascade toggle ignores the previous stream") {
    std::mt19937_64 rng(7);
    for (bool halved : {false, true}) {
        auto cfg = make_config({{4, 4, 4, 2}, {2, 2, 4, 2}}, halved, true);
        Unit<float> u(8, cfg);
        const auto q = random_tensor({1, 4, 4, 4}, rng), k = random_tensor({1, 4, 4, 4}, rng),
                   v = random_tensor({1, 4, 4, 4}, rng), prev = random_tensor({1, 4, 4, 8}, rng);
        Graph<float> g;
        Binder<float> p(g, u.store);
        auto x2 = cascade_step<float>(2, {g.constant(q), g.constant(k), g.constant(v)}, g.constant(prev), p, kPrefix, cfg);
        CHECK(max_abs_diff(x2.value(), group_oracle(u, 2, q, k, v, &prev)) < 1e-5);
        CHECK_THROWS_AS(cascade_step<float>(2, {g.constant(q), g.constant(k), g.constant(v)}, std::nullopt, p, kPrefix, cfg),
                        UsageError);
    }
    auto off = make_config({{4, 4, 4, 2}, {2, 2, 4, 2}}, false, false, 2);
    Unit<float> u(8, off);
    Graph<float> g;
    Binder<float> p(g, u.store);
    Qkv<float> in{g.constant(random_tensor({1, 4, 4, 4}, rng)), g.constant(random_tensor({1, 4, 4, 4}, rng)),
                  g.constant(random_tensor({1, 4, 4, 4}, rng))};
    auto with = cascade_step<float>(2, in, g.constant(random_tensor({1, 4, 4, 4}, rng)), p, kPrefix, off);
    auto without = cascade_step<float>(2, in, std::nullopt, p, kPrefix, off);
    CHECK(with.value() == without.value());
}

TEST_CASE("cmsa_forward: one global group with identity fusion equals dense self-attention") {
    std::mt19937_64 rng(8);
    for (int heads : {1, 2, 4}) {
        auto cfg = make_config({{4, 4, 8, heads}}, false, false);
        Unit<float> u(8, cfg);
        identity_init_spatial_fusion(u.store, kPrefix, 1);
        const auto x = random_tensor({1, 4, 4, 8}, rng);
        const Tensor* none = nullptr;
        const auto q = conv2d_oracle(x, u.w("q.w"), none, 1, 0, 1);
        const auto k = gelu_oracle(conv2d_oracle(x, u.w("k.w"), none, 1, 0, 1));
        const auto v = gelu_oracle(conv2d_oracle(x, u.w("v.w"), none, 1, 0, 1));
        const auto expect = linear_oracle(dense_attention_oracle(q, k, v, heads), u.w("out.w"), u.wp("out.b"));
        CHECK(max_abs_diff(u.run(x), expect) < 1e-5);
    }
}

TEST_CASE("cmsa_forward matches the composed loop oracle across ablation rows and options") {
    std::mt19937_64 rng(9);
    for (int row = 1; row <= 5; ++row)
        for (bool halved : {false, true})
            for (bool doubled : {false, true}) {
                INFO("row " << row << " halved " << halved << " doubled " << doubled);
                auto cfg = make_config({{8, 4, 8, 2}, {4, 2, 4, 1}, {2, 2, 4, 1}}, halved, doubled, row);
                Unit<float> u(12, cfg, 100 + row);
                const auto x = random_tensor({2, 8, 4, 12}, rng);
                std::vector<Tensor> streams;
                const auto y = u.run(x, &streams);
                CHECK(y.shape() == x.shape());
                CHECK(max_abs_diff(y, unit_oracle(u, x)) < 1e-5);
                // the output is the linear map of the concatenated streams
                CHECK(max_abs_diff(y, linear_oracle(concat_oracle(streams), u.w("out.w"), u.wp("out.b"))) < 1e-5);
                CHECK(streams.size() == (row == 1 ? 1u : 3u));
            }
}

TEST_CASE("cmsa_forward: zero value projection with identity fusion gives the output bias") {
    std::mt19937_64 rng(10);
    auto cfg = make_config({{4, 4, 8, 2}}, false, false);
    Unit<float> u(8, cfg);
    identity_init_spatial_fusion(u.store, kPrefix, 1);
    for (auto& v : u.store.get(kPrefix + "v.w").value.data()) v = 0.f;
    const auto y = u.run(random_tensor({1, 4, 4, 8}, rng));
    const auto& b = u.w("out.b");
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(b[i % 8]));
}

TEST_CASE("cmsa_forward: batch equivariance") {
    std::mt19937_64 rng(11);
    auto cfg = make_config({{8, 6, 16, 2}, {4, 3, 16, 2}}, false, true);
    Unit<float> u(24, cfg);
    const auto a = random_tensor({1, 8, 6, 24}, rng), b = random_tensor({1, 8, 6, 24}, rng);
    Tensor both({2, 8, 6, 24});
    std::copy(a.data().begin(), a.data().end(), both.data().begin());
    std::copy(b.data().begin(), b.data().end(), both.data().begin() + a.numel());
    const auto y = u.run(both), ya = u.run(a), yb = u.run(b);
    double worst = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, static_cast<double>(std::abs(y[i] - ya[i])));
        worst = std::max(worst, static_cast<double>(std::abs(y[a.numel() + i] - yb[i])));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("property: perturbing group k parameters leaves earlier streams bitwise unchanged") {
    std::mt19937_64 rng(12);
    auto cfg = make_config({{8, 8, 8, 2}, {4, 4, 8, 2}, {2, 2, 8, 2}}, true, true);
    const auto x = random_tensor({1, 8, 8, 16}, rng);
    for (int k = 1; k <= 3; ++k) {
        Unit<float> u(16, cfg);
        std::vector<Tensor> before, after;
        u.run(x, &before);
        const std::string g = kPrefix + "g" + std::to_string(k) + ".";
        for (std::size_t i = 0; i < u.store.size(); ++i)
            if (u.store[i].name.starts_with(g))
                for (auto& v : u.store[i].value.data()) v += 0.05f;
        u.run(x, &after);
        for (int j = 1; j <= 3; ++j) {
            INFO("perturbed group " << k << " stream " << j);
            if (j < k)
                CHECK(before[j - 1] == after[j - 1]);
            else
                CHECK(max_abs_diff(before[j - 1], after[j - 1]) > 1e-4);
        }
    }
}

TEST_CASE("property: with cascade off a perturbation stays inside its window") {
    std::mt19937_64 rng(13);
    for (bool fusion : {true, false}) {
        auto cfg = make_config({{8, 8, 8, 2}, {4, 4, 8, 2}}, true, true, fusion ? 5 : 2);
        cfg.ablation.cascade = false;
        Unit<float> u(8, cfg);
        auto x = random_tensor({1, 8, 8, 8}, rng);
        std::vector<Tensor> before, after;
        u.run(x, &before);
        // (1, 2) is off every window border, so the 3x3 depthwise stage stays local
        const std::int64_t pi = fusion ? 1 : 3, pj = fusion ? 2 : 0;
        for (std::int64_t c = 0; c < 8; ++c) x.at({0, pi, pj, c}) += 1.0f;
        u.run(x, &after);
        const auto& b = before[1];
        const auto& a = after[1];
        bool inside_changed = false, outside_same = true;
        for (std::int64_t i = 0; i < 8; ++i)
            for (std::int64_t j = 0; j < 8; ++j)
                for (std::int64_t c = 0; c < b.dim(3); ++c) {
                    const bool inside = i < 4 && j < 4;
                    const bool same = a.at({0, i, j, c}) == b.at({0, i, j, c});
                    if (inside && !same) inside_changed = true;
                    if (!inside && !same) outside_same = false;
                }
        CHECK(inside_changed);
        CHECK(outside_same);
    }
}

TEST_CASE("shape preservation on every stage configuration of the three variants") {
    struct Stage { int c, h, w; std::vector<GroupSpec> groups; };
    const std::vector<Stage> stages{
        {96, 32, 24, {{32, 24, 32, 2}, {16, 12, 32, 2}, {8, 6, 16, 1}}},
        {160, 16, 12, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
        {224, 8, 6, {{8, 6, 64, 4}, {8, 6, 64, 4}}},
        {128, 32, 24, {{32, 24, 16, 1}, {16, 12, 32, 2}, {8, 6, 16, 1}}},
        {192, 16, 12, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
        {256, 8, 6, {{8, 6, 64, 4}, {8, 6, 80, 5}}},
        {256, 16, 12, {{16, 12, 48, 3}, {8, 6, 48, 3}}},
        {320, 8, 6, {{8, 6, 64, 4}, {8, 6, 64, 4}}},
    };
    std::mt19937_64 rng(14);
    for (const auto& s : stages) {
        Unit<float> u(s.c, make_config(s.groups, true, true));
        const auto y = u.run(random_tensor({1, s.h, s.w, s.c}, rng));
        CHECK(y.shape() == Shape{1, s.h, s.w, s.c});
        CHECK(y.all_finite());
    }
}

TEST_CASE("gradient check on the stage-3 configuration of the small variant") {
    std::mt19937_64 rng(15);
    Unit<double> u(224, make_config({{8, 6, 64, 4}, {8, 6, 64, 4}}, true, true));
    std::vector<Parameter<double>*> params;
    for (const char* n : {"q.w", "g2.cf.w", "g2.sf.dw.w", "g1.sf.pw.b", "out.w"}) params.push_back(&u.store.get(kPrefix + n));
    GradCheckOptions o;
    o.eps = 1e-4;
    o.samples_per_tensor = 6;
    o.abs_floor = 1e-6;
    auto report = grad_check<double>(
        [&](Graph<double>& g, std::span<const Var<double>> in) {
            Binder<double> p(g, u.store);
            return cmsa_forward(in[0], p, kPrefix, u.cfg);
        },
        {random_tensor<double>({1, 8, 6, 224}, rng)}, o, params);
    INFO(report.worst);
    CHECK(report.max_rel_error < 1e-2);
}
