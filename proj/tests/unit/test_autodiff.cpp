#include <cmath>
#include <random>

#include "cmsa/errors.hpp"
#include "cmsa/grad_check.hpp"
#include "cmsa/ops.hpp"
#include "cmsa/window.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cmsa;
using cmsa::testing::random_tensor;

namespace {

using Vars = std::span<const Var<double>>;

GradCheckReport check64(const GraphBuilder<double>& fn, std::vector<Tensor64> inputs, int samples = 12) {
    GradCheckOptions o;
    o.eps = 1e-3;
    o.samples_per_tensor = samples;
    o.abs_floor = 1e-6;
    return grad_check<double>(fn, std::move(inputs), o);
}

}  // namespace

TEST_CASE("backward: sum and sum of squares") {
    std::mt19937_64 rng(1);
    auto xt = random_tensor({3, 4}, rng);
    {
        Graph<float> g;
        auto x = g.input(xt);
        g.backward(sum(x));
        const auto gx = g.grad(x);
        for (float v : gx.data()) CHECK(v == 1.f);
    }
    {
        Graph<float> g;
        auto x = g.input(xt);
        g.backward(sum(mul(x, x)));
        auto gx = g.grad(x);
        for (std::int64_t i = 0; i < xt.numel(); ++i) CHECK(gx[i] == doctest::Approx(2 * xt[i]));
    }
}

TEST_CASE("backward: a value used twice accumulates both paths exactly") {
    std::mt19937_64 rng(2);
    auto xt = random_tensor({5}, rng);
    Graph<float> g;
    auto x = g.input(xt);
    auto y = scale(x, 3.0);
    g.backward(sum(add(y, y)));
    const auto gx = g.grad(x);
    for (float v : gx.data()) CHECK(v == 6.f);
}

TEST_CASE("backward: non-scalar loss is a usage error; topological order holds") {
    Graph<float> g;
    auto x = g.input(Tensor({2, 2}, 1.f));
    auto y = gelu(mul(x, x));
    for (std::size_t id = 0; id < g.size(); ++id)
        for (int in : g.inputs_of(static_cast<int>(id))) CHECK(in < static_cast<int>(id));
    CHECK_THROWS_AS(g.backward(y), UsageError);
}

TEST_CASE("backward: parameters reachable from the loss get same-shape gradients") {
    ParamStore<float> store;
    std::mt19937_64 rng(3);
    store.add("w", random_tensor({3, 2}, rng));
    store.add("b", random_tensor({2}, rng));
    store.add("unused", random_tensor({4}, rng));
    store.zero_grads();
    Graph<float> g;
    Binder<float> p(g, store);
    auto y = linear(g.constant(random_tensor({4, 3}, rng)), p("w"), p("b"));
    g.backward(sum(y));
    g.accumulate_parameter_grads();
    CHECK(store.get("w").grad.shape() == store.get("w").value.shape());
    CHECK(store.get("b").grad[0] == doctest::Approx(4.0));
    for (float v : store.get("unused").grad.data()) CHECK(v == 0.f);
}

TEST_CASE("grad_check: linear with fixed weight is exact") {
    std::mt19937_64 rng(4);
    const Tensor64 w = random_tensor<double>({3, 2}, rng);
    auto r = check64([&](Graph<double>& g, Vars in) { return linear(in[0], g.constant(w), std::nullopt); },
                     {random_tensor<double>({2, 3}, rng)});
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("grad_check: softmax after linear") {
    std::mt19937_64 rng(5);
    auto r = check64([](Graph<double>&, Vars in) { return softmax_last(linear(in[0], in[1], in[2])); },
                     {random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 5}, rng), random_tensor<double>({5}, rng)});
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("grad_check: non-deterministic function is rejected") {
    int calls = 0;
    auto fn = [&](Graph<double>& g, Vars in) {
        ++calls;
        return add(in[0], g.constant(Tensor64(in[0].shape(), static_cast<double>(calls))));
    };
    CHECK_THROWS_AS(check64(fn, {Tensor64({2}, 1.0)}), UsageError);
}

TEST_CASE("property: every differentiable primitive passes a 64-bit gradient check") {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> small(1, 3);
    for (int trial = 0; trial < 3; ++trial) {
        const int n = small(rng), h = 2 * small(rng), w = 2 * small(rng), c = small(rng) + 1;
        const Shape map{n, h, w, c};
        INFO("trial " << trial << " map " << shape_str(map));

        CHECK(check64([](Graph<double>&, Vars in) { return conv2d(in[0], in[1], in[2], {1, 1, 1}); },
                      {random_tensor<double>(map, rng), random_tensor<double>({3, 3, c, 3}, rng), random_tensor<double>({3}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([c](Graph<double>&, Vars in) { return conv2d(in[0], in[1], in[2], {2, 1, c}); },
                      {random_tensor<double>(map, rng), random_tensor<double>({3, 3, 1, c}, rng), random_tensor<double>({c}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return conv2d(in[0], in[1], std::nullopt); },
                      {random_tensor<double>(map, rng), random_tensor<double>({1, 1, c, 5}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return linear(in[0], in[1], in[2]); },
                      {random_tensor<double>(map, rng), random_tensor<double>({c, 2}, rng), random_tensor<double>({2}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return softmax_last(in[0]); }, {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return gelu(in[0]); }, {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64(
                  [c](Graph<double>&, Vars in) {
                      Tensor64 rm({c}), rv({c}, 1.0);
                      return batch_norm(in[0], in[1], in[2], rm, rv, {true, 0.1, 1e-5});
                  },
                  {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64(
                  [c, &rng](Graph<double>&, Vars in) {
                      Tensor64 rm({c}, 0.3), rv({c}, 2.0);
                      return batch_norm(in[0], in[1], in[2], rm, rv, {false, 0.1, 1e-5});
                  },
                  {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return layer_norm(in[0], in[1], in[2], 1e-6); },
                      {random_tensor<double>(map, rng), random_tensor<double>({c}, rng), random_tensor<double>({c}, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return avg_pool2d(in[0]); }, {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return global_avg_pool(in[0]); }, {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return mul(add(in[0], in[1]), sub(in[0], in[1])); },
                      {random_tensor<double>(map, rng), random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return concat_last({slice_last(in[0], 1, 1), in[0]}); },
                      {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([h, w](Graph<double>&, Vars in) {
                          return window_reverse(scale(window_partition(in[0], h / 2, w / 2), 1.5), in[0].dim(0), h, w, h / 2, w / 2);
                      },
                      {random_tensor<double>(map, rng)})
                  .max_rel_error < 1e-3);
        CHECK(check64([](Graph<double>&, Vars in) { return attention_core(in[0], in[1], in[2], 2); },
                      {random_tensor<double>({n, 6, 4}, rng), random_tensor<double>({n, 3, 4}, rng), random_tensor<double>({n, 3, 6}, rng)})
                  .max_rel_error < 1e-3);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (auto& l : labels) l = small(rng);
        CHECK(check64([labels](Graph<double>&, Vars in) {
                          return cross_entropy_smoothed(in[0], std::span<const int>(labels), 0.1);
                      },
                      {random_tensor<double>({n, 5}, rng)})
                  .max_rel_error < 1e-3);
    }
}
