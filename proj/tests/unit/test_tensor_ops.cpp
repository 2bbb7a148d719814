#include <cmath>
#include <random>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cmsa;
using cmsa::testing::random_tensor;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.dim(-1) == 4);
    CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ConfigError);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ConfigError);
}

TEST_CASE("conv2d: all-ones 3x3 counts overlap") {
    Graph<float> g;
    auto x = g.constant(Tensor::ones({1, 3, 3, 1}));
    auto k = g.constant(Tensor::ones({3, 3, 1, 1}));
    auto y = conv2d(x, k, std::nullopt, {1, 1, 1}).value();
    CHECK(y.at({0, 1, 1, 0}) == doctest::Approx(9.0));
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4.0));
    CHECK(y.at({0, 2, 2, 0}) == doctest::Approx(4.0));
    CHECK(y.at({0, 0, 1, 0}) == doctest::Approx(6.0));
}

TEST_CASE("conv2d: 1x1 identity kernel is a passthrough") {
    std::mt19937_64 rng(1);
    Graph<float> g;
    auto xt = random_tensor({2, 4, 5, 3}, rng);
    Tensor id({1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) id.at({0, 0, c, c}) = 1;
    auto y = conv2d(g.constant(xt), g.constant(id), std::nullopt).value();
    CHECK(max_abs_diff(y, xt) == 0.0);
}

TEST_CASE("conv2d: depthwise 3x3 matches nested-loop oracle") {
    std::mt19937_64 rng(2);
    auto xt = random_tensor({1, 5, 5, 4}, rng);
    auto kt = random_tensor({3, 3, 1, 4}, rng);
    auto bt = random_tensor({4}, rng);
    for (int stride : {1, 2}) {
        Graph<float> g;
        auto y = conv2d(g.constant(xt), g.constant(kt), g.constant(bt), {stride, 1, 4}).value();
        CHECK(max_abs_diff(y, cmsa::testing::conv2d_oracle(xt, kt, &bt, stride, 1, 4)) < 1e-5);
    }
}

TEST_CASE("property: conv2d groups=1 equals the oracle on random shapes up to 1x8x8x4") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(1, 8), ch(1, 4), ks(0, 1), pd(0, 1), st(1, 2);
    for (int trial = 0; trial < 40; ++trial) {
        const int k = ks(rng) ? 3 : 1;
        const int pad = k == 3 ? pd(rng) : 0;
        const int h = std::max(dim(rng), k), w = std::max(dim(rng), k);
        const int cin = ch(rng), cout = ch(rng), stride = st(rng);
        auto xt = random_tensor({1, h, w, cin}, rng);
        auto kt = random_tensor({k, k, cin, cout}, rng);
        auto bt = random_tensor({cout}, rng);
        Graph<float> g;
        auto y = conv2d(g.constant(xt), g.constant(kt), g.constant(bt), {stride, pad, 1}).value();
        CHECK(max_abs_diff(y, cmsa::testing::conv2d_oracle(xt, kt, &bt, stride, pad, 1)) < 1e-5);
    }
}

TEST_CASE("conv2d: grouped conv matches oracle and rejects bad shapes") {
    std::mt19937_64 rng(4);
    auto xt = random_tensor({2, 4, 4, 4}, rng);
    auto kt = random_tensor({3, 3, 2, 6}, rng);
    Graph<float> g;
    auto y = conv2d(g.constant(xt), g.constant(kt), std::nullopt, {1, 1, 2}).value();
    CHECK(max_abs_diff(y, cmsa::testing::conv2d_oracle(xt, kt, static_cast<const Tensor*>(nullptr), 1, 1, 2)) < 1e-5);

    CHECK_THROWS_AS(conv2d(g.constant(xt), g.constant(Tensor({3, 3, 1, 6})), std::nullopt, {1, 1, 3}), ConfigError);
    CHECK_THROWS_AS(conv2d(g.constant(xt), g.constant(Tensor({3, 3, 3, 6})), std::nullopt, {1, 1, 1}), ConfigError);
    CHECK_THROWS_WITH_AS(conv2d(g.constant(Tensor({1, 2, 2, 1})), g.constant(Tensor({3, 3, 1, 1})), std::nullopt, {1, 0, 1}),
                         doctest::Contains("zero-size"), ConfigError);
}

TEST_CASE("linear: identity, affine example, matmul oracle") {
    Graph<float> g;
    auto x = g.constant(Tensor({1, 2}, {1.f, 2.f}));
    auto w = g.constant(Tensor({2, 2}, {1.f, 0.f, 0.f, 1.f}));
    auto b = g.constant(Tensor({2}, {3.f, 3.f}));
    auto y = linear(x, w, b).value();
    CHECK(y[0] == 4.f);
    CHECK(y[1] == 5.f);
    CHECK(linear(x, w, std::nullopt).value() == x.value());

    std::mt19937_64 rng(5);
    auto xt = random_tensor({2, 3}, rng);
    auto wt = random_tensor({3, 4}, rng);
    std::vector<double> a(xt.data().begin(), xt.data().end()), bb(wt.data().begin(), wt.data().end());
    auto ref = cmsa::testing::matmul_oracle<float>(a, bb, 2, 3, 4);
    auto got = linear(g.constant(xt), g.constant(wt), std::nullopt).value();
    for (int i = 0; i < 8; ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-6);

    CHECK_THROWS_AS(linear(g.constant(Tensor({2, 5})), g.constant(wt), std::nullopt), ConfigError);
}

TEST_CASE("softmax_last: symmetry, stabilization, direct oracle, shift invariance") {
    Graph<float> g;
    auto y = softmax_last(g.constant(Tensor({2}, {0.f, 0.f}))).value();
    CHECK(y[0] == doctest::Approx(0.5));
    CHECK(y[1] == doctest::Approx(0.5));
    auto big = softmax_last(g.constant(Tensor({2}, {1000.f, 0.f}))).value();
    CHECK(big.all_finite());
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] == doctest::Approx(0.0));

    std::mt19937_64 rng(6);
    auto xt = random_tensor<double>({7}, rng, 0.5);
    Graph<double> gd;
    auto sd = softmax_last(gd.constant(xt)).value();
    double z = 0;
    for (double v : xt.data()) z += std::exp(v);
    for (int i = 0; i < 7; ++i) CHECK(std::abs(sd[i] - std::exp(xt[i]) / z) < 1e-6);

    for (int trial = 0; trial < 20; ++trial) {
        auto rows = random_tensor({3, 9}, rng, 4.0);
        auto shifted = rows;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 9; ++c) shifted[r * 9 + c] += static_cast<float>(trial - 10);
        auto a = softmax_last(g.constant(rows)).value();
        auto b = softmax_last(g.constant(shifted)).value();
        for (int r = 0; r < 3; ++r) {
            double s = 0;
            for (int c = 0; c < 9; ++c) s += a[r * 9 + c];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
        CHECK(max_abs_diff(a, b) < 1e-6);
    }
}

TEST_CASE("gelu: zero, asymptote, quadrature oracle") {
    Graph<double> g;
    auto y = gelu(g.constant(Tensor64({3}, {0.0, 10.0, 1.0}))).value();
    CHECK(y[0] == 0.0);
    CHECK(std::abs(y[1] - 10.0) < 1e-4);
    CHECK(std::abs(y[2] - 1.0 * cmsa::testing::normal_cdf_quadrature(1.0)) < 1e-4);
    CHECK(std::abs(y[2] - 0.8413447460685429) < 1e-6);
}

TEST_CASE("batch_norm: normalized input, inference affine case, two-pass oracle") {
    Graph<float> g;
    // each channel already zero-mean, unit (biased) variance over N*H*W
    Tensor x({1, 2, 2, 2}, {1.f, -1.f, -1.f, 1.f, 1.f, -1.f, -1.f, 1.f});
    Tensor rm({2}), rv({2}, 1.f);
    auto y = batch_norm(g.constant(x), g.constant(Tensor::ones({2})), g.constant(Tensor({2})), rm, rv, {true, 0.1, 1e-5}).value();
    CHECK(max_abs_diff(y, x) < 1e-5);

    std::mt19937_64 rng(7);
    auto xi = random_tensor({2, 3, 3, 4}, rng);
    Tensor zm({4}), uv({4}, 1.f);
    auto yi = batch_norm(g.constant(xi), g.constant(Tensor({4}, 2.f)), g.constant(Tensor({4}, 1.f)), zm, uv,
                         {false, 0.1, 0.0}).value();
    for (std::int64_t i = 0; i < xi.numel(); ++i) CHECK(yi[i] == doctest::Approx(2 * xi[i] + 1).epsilon(1e-6));

    // training statistics vs explicit two-pass mean/variance
    Tensor64 xd = random_tensor<double>({2, 3, 3, 4}, rng);
    Tensor64 rmd({4}), rvd({4}, 1.0);
    Graph<double> gd;
    auto yd = batch_norm(gd.constant(xd), gd.constant(Tensor64::ones({4})), gd.constant(Tensor64({4})), rmd, rvd,
                         {true, 0.1, 1e-5}).value();
    for (int c = 0; c < 4; ++c) {
        double m = 0, v = 0;
        for (int r = 0; r < 18; ++r) m += xd[r * 4 + c];
        m /= 18;
        for (int r = 0; r < 18; ++r) v += (xd[r * 4 + c] - m) * (xd[r * 4 + c] - m);
        const double var_b = v / 18, var_u = v / 17;
        for (int r = 0; r < 18; ++r) CHECK(std::abs(yd[r * 4 + c] - (xd[r * 4 + c] - m) / std::sqrt(var_b + 1e-5)) < 1e-6);
        CHECK(std::abs(rmd[c] - 0.1 * m) < 1e-12);
        CHECK(std::abs(rvd[c] - (0.9 + 0.1 * var_u)) < 1e-12);
    }

    // zero-variance channel stays finite
    Tensor flat({2, 1, 1, 1}, 3.f), m1({1}), v1({1}, 1.f);
    auto yf = batch_norm(g.constant(flat), g.constant(Tensor::ones({1})), g.constant(Tensor({1})), m1, v1).value();
    CHECK(yf.all_finite());
    CHECK_THROWS_AS(batch_norm(g.constant(flat), g.constant(Tensor::ones({2})), g.constant(Tensor({1})), m1, v1), ConfigError);
}

TEST_CASE("layer_norm: constant input, normalized pair, explicit oracle") {
    Graph<double> g;
    auto beta = Tensor64({3}, {0.5, -1.0, 2.0});
    auto y = layer_norm(g.constant(Tensor64({3}, 4.0)), g.constant(Tensor64({3}, {2.0, 3.0, 4.0})), g.constant(beta)).value();
    CHECK(max_abs_diff(y, beta) < 1e-9);
    auto y2 = layer_norm(g.constant(Tensor64({2}, {1.0, -1.0})), g.constant(Tensor64::ones({2})), g.constant(Tensor64({2}))).value();
    CHECK(std::abs(y2[0] - 1.0) < 1e-5);
    CHECK(std::abs(y2[1] + 1.0) < 1e-5);

    std::mt19937_64 rng(8);
    auto x = random_tensor<double>({3, 6}, rng, 2.0);
    auto gm = random_tensor<double>({6}, rng);
    auto bt = random_tensor<double>({6}, rng);
    auto out = layer_norm(g.constant(x), g.constant(gm), g.constant(bt), 1e-6).value();
    for (int r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (int c = 0; c < 6; ++c) m += x[r * 6 + c] / 6;
        for (int c = 0; c < 6; ++c) v += (x[r * 6 + c] - m) * (x[r * 6 + c] - m) / 6;
        for (int c = 0; c < 6; ++c)
            CHECK(std::abs(out[r * 6 + c] - ((x[r * 6 + c] - m) / std::sqrt(v + 1e-6) * gm[c] + bt[c])) < 1e-6);
    }
}

TEST_CASE("avg_pool2d: 2x2 example, constants, window-mean oracle, indivisible error") {
    Graph<float> g;
    auto y = avg_pool2d(g.constant(Tensor({1, 2, 2, 1}, {1.f, 2.f, 3.f, 4.f}))).value();
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 2.5f);
    auto c = avg_pool2d(g.constant(Tensor({1, 4, 4, 2}, 7.f))).value();
    for (float v : c.data()) CHECK(v == 7.f);

    std::mt19937_64 rng(9);
    auto x = random_tensor({1, 4, 6, 1}, rng);
    auto p = avg_pool2d(g.constant(x)).value();
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            const float ref = (x.at({0, 2 * i, 2 * j, 0}) + x.at({0, 2 * i, 2 * j + 1, 0}) + x.at({0, 2 * i + 1, 2 * j, 0}) +
                               x.at({0, 2 * i + 1, 2 * j + 1, 0})) * 0.25f;
            CHECK(p.at({0, i, j, 0}) == ref);
        }
    CHECK_THROWS_AS(avg_pool2d(g.constant(Tensor({1, 3, 4, 1}))), ConfigError);
}

TEST_CASE("concat_last and slice_last round-trip") {
    std::mt19937_64 rng(10);
    Graph<float> g;
    auto a = g.constant(random_tensor({2, 3, 2}, rng));
    auto b = g.constant(random_tensor({2, 3, 5}, rng));
    auto c = concat_last({a, b});
    CHECK(c.shape() == Shape{2, 3, 7});
    CHECK(slice_last(c, 0, 2).value() == a.value());
    CHECK(slice_last(c, 2, 5).value() == b.value());
    CHECK_THROWS_AS(slice_last(c, 5, 3), ConfigError);
    CHECK_THROWS_AS(concat_last({a, g.constant(Tensor({2, 4, 1}))}), ConfigError);
}

TEST_CASE("cross_entropy_smoothed: uniform, peaked, direct formula, label range") {
    Graph<double> g;
    std::vector<int> lab{3};
    auto u = cross_entropy_smoothed(g.constant(Tensor64({1, 10})), std::span<const int>(lab), 0.0).value();
    CHECK(std::abs(u[0] - std::log(10.0)) < 1e-12);
    Tensor64 peaked({1, 10});
    peaked[3] = 100.0;
    CHECK(cross_entropy_smoothed(g.constant(peaked), std::span<const int>(lab), 0.0).value()[0] < 1e-12);

    std::mt19937_64 rng(11);
    auto z = random_tensor<double>({4, 5}, rng, 2.0);
    std::vector<int> labels{0, 4, 2, 2};
    const double eps = 0.1;
    auto got = cross_entropy_smoothed(g.constant(z), std::span<const int>(labels), eps).value()[0];
    double ref = 0;
    for (int n = 0; n < 4; ++n) {
        double zs = 0;
        for (int k = 0; k < 5; ++k) zs += std::exp(z[n * 5 + k]);
        for (int k = 0; k < 5; ++k) {
            const double q = (k == labels[n] ? 1 - eps : 0) + eps / 5;
            ref -= q * std::log(std::exp(z[n * 5 + k]) / zs);
        }
    }
    CHECK(std::abs(got - ref / 4) < 1e-6);
    std::vector<int> bad{5, 0, 0, 0};
    CHECK_THROWS_AS(cross_entropy_smoothed(g.constant(z), std::span<const int>(bad), 0.0), DataError);
}
