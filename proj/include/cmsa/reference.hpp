#pragma once

// Independent reference implementations for verification. Everything here is
// plain nested loops over BasicTensor; nothing calls into the graph ops.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cmsa/tensor.hpp"

namespace cmsa::reference {

template <typename T = float>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(nd(rng));
    return t;
}

template <typename T = float>
BasicTensor<T> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> ud(lo, hi);
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(ud(rng));
    return t;
}

/// Cross-correlation by definition, any groups.
template <typename T>
BasicTensor<T> conv2d_oracle(const BasicTensor<T>& x, const BasicTensor<T>& k, const BasicTensor<T>* bias, int stride,
                             int pad, int groups) {
    const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
    const auto kh = k.dim(0), kw = k.dim(1), Cout = k.dim(3);
    const auto cpg_in = Cin / groups, cpg_out = Cout / groups;
    const auto Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    BasicTensor<T> y({N, Ho, Wo, Cout});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oh = 0; oh < Ho; ++oh)
            for (std::int64_t ow = 0; ow < Wo; ++ow)
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double acc = bias ? (*bias)[co] : 0.0;
                    const auto g = co / cpg_out;
                    for (std::int64_t i = 0; i < kh; ++i)
                        for (std::int64_t j = 0; j < kw; ++j) {
                            const auto ih = oh * stride - pad + i, iw = ow * stride - pad + j;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            for (std::int64_t ci = 0; ci < cpg_in; ++ci)
                                acc += static_cast<double>(x.at({n, ih, iw, g * cpg_in + ci})) *
                                       k.at({i, j, ci, co});
                        }
                    y.at({n, oh, ow, co}) = static_cast<T>(acc);
                }
    return y;
}

/// Triple-loop row-major matmul: [M,K] x [K,N].
template <typename T>
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, std::int64_t m,
                                  std::int64_t kk, std::int64_t n) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t p = 0; p < kk; ++p) c[i * n + j] += a[i * kk + p] * b[p * n + j];
    return c;
}

/// Affine map over the last axis, element by element.
template <typename T>
BasicTensor<T> linear_oracle(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b) {
    const auto din = w.dim(0), dout = w.dim(1);
    const auto rows = x.numel() / din;
    Shape s = x.shape();
    s.back() = dout;
    BasicTensor<T> y(s);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t o = 0; o < dout; ++o) {
            double acc = b ? (*b)[o] : 0.0;
            for (std::int64_t i = 0; i < din; ++i) acc += static_cast<double>(x[r * din + i]) * w[i * dout + o];
            y[r * dout + o] = static_cast<T>(acc);
        }
    return y;
}

/// Dense full self-attention on one map: every query attends to every key.
/// q [N,H,W,d], k [N,Hk,Wk,d], v [N,Hk,Wk,dv]; head h uses channel slice h.
template <typename T>
BasicTensor<T> dense_attention_oracle(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                      int heads) {
    const auto N = q.dim(0), L = q.dim(1) * q.dim(2), d = q.dim(3);
    const auto Lk = k.dim(1) * k.dim(2), dv = v.dim(3);
    const auto dh = d / heads, dvh = dv / heads;
    BasicTensor<T> out(q.shape().size() == 4 ? Shape{N, q.dim(1), q.dim(2), dv} : Shape{});
    for (std::int64_t n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h)
            for (std::int64_t i = 0; i < L; ++i) {
                std::vector<double> s(static_cast<std::size_t>(Lk));
                double mx = -1e300;
                for (std::int64_t j = 0; j < Lk; ++j) {
                    double acc = 0;
                    for (std::int64_t c = 0; c < dh; ++c)
                        acc += static_cast<double>(q[(n * L + i) * d + h * dh + c]) * k[(n * Lk + j) * d + h * dh + c];
                    s[j] = acc / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::int64_t c = 0; c < dvh; ++c) {
                    double acc = 0;
                    for (std::int64_t j = 0; j < Lk; ++j) acc += s[j] / z * v[(n * Lk + j) * dv + h * dvh + c];
                    out[(n * L + i) * dv + h * dvh + c] = static_cast<T>(acc);
                }
            }
    return out;
}

/// Window attention by explicit loops over windows and tokens.
template <typename T>
BasicTensor<T> window_attention_oracle(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, int sq,
                                       int tq, int heads) {
    const auto N = q.dim(0), H = q.dim(1), W = q.dim(2), d = q.dim(3);
    const auto Hk = k.dim(1), Wk = k.dim(2), dv = v.dim(3);
    const auto sk = sq * Hk / H, tk = tq * Wk / W;
    const auto dh = d / heads, dvh = dv / heads;
    BasicTensor<T> out({N, H, W, dv});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t wr = 0; wr < H / sq; ++wr)
            for (std::int64_t wc = 0; wc < W / tq; ++wc)
                for (int h = 0; h < heads; ++h)
                    for (std::int64_t qi = 0; qi < sq; ++qi)
                        for (std::int64_t qj = 0; qj < tq; ++qj) {
                            const auto y = wr * sq + qi, x = wc * tq + qj;
                            std::vector<double> s;
                            std::vector<std::pair<std::int64_t, std::int64_t>> pos;
                            for (std::int64_t ki = 0; ki < sk; ++ki)
                                for (std::int64_t kj = 0; kj < tk; ++kj) {
                                    const auto ky = wr * sk + ki, kx = wc * tk + kj;
                                    double acc = 0;
                                    for (std::int64_t c = 0; c < dh; ++c)
                                        acc += static_cast<double>(q.at({n, y, x, h * dh + c})) *
                                               k.at({n, ky, kx, h * dh + c});
                                    s.push_back(acc / std::sqrt(static_cast<double>(dh)));
                                    pos.emplace_back(ky, kx);
                                }
                            double mx = -1e300, z = 0;
                            for (double e : s) mx = std::max(mx, e);
                            for (double& e : s) z += (e = std::exp(e - mx));
                            for (std::int64_t c = 0; c < dvh; ++c) {
                                double acc = 0;
                                for (std::size_t j = 0; j < s.size(); ++j)
                                    acc += s[j] / z * v.at({n, pos[j].first, pos[j].second, h * dvh + c});
                                out.at({n, y, x, h * dvh + c}) = static_cast<T>(acc);
                            }
                        }
    return out;
}

/// x * Phi(x) through the closed-form erf expression, elementwise.
template <typename T>
BasicTensor<T> gelu_oracle(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        y[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))));
    }
    return y;
}

/// Channel slice [start, start + len) of the last axis.
template <typename T>
BasicTensor<T> slice_oracle(const BasicTensor<T>& x, std::int64_t start, std::int64_t len) {
    const auto c = x.shape().back();
    Shape s = x.shape();
    s.back() = len;
    BasicTensor<T> y(s);
    for (std::int64_t r = 0; r < x.numel() / c; ++r)
        for (std::int64_t j = 0; j < len; ++j) y[r * len + j] = x[r * c + start + j];
    return y;
}

/// Concatenation along the last axis.
template <typename T>
BasicTensor<T> concat_oracle(const std::vector<BasicTensor<T>>& parts) {
    Shape s = parts.at(0).shape();
    std::int64_t total = 0;
    for (const auto& p : parts) total += p.shape().back();
    const auto rows = parts[0].numel() / parts[0].shape().back();
    s.back() = total;
    BasicTensor<T> y(s);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const auto c = p.shape().back();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j) y[r * total + off + j] = p[r * c + j];
        off += c;
    }
    return y;
}

/// 2x2 stride-2 mean pooling.
template <typename T>
BasicTensor<T> avg_pool_oracle(const BasicTensor<T>& x) {
    const auto N = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2, C = x.dim(3);
    BasicTensor<T> y({N, H, W, C});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j)
                for (std::int64_t c = 0; c < C; ++c)
                    y.at({n, i, j, c}) = static_cast<T>(
                        (static_cast<double>(x.at({n, 2 * i, 2 * j, c})) + x.at({n, 2 * i + 1, 2 * j, c}) +
                         x.at({n, 2 * i, 2 * j + 1, c}) + x.at({n, 2 * i + 1, 2 * j + 1, c})) /
                        4.0);
    return y;
}

/// Gaussian CDF by composite Simpson quadrature of the density on [-12, x].
inline double normal_cdf_quadrature(double x, int intervals = 20000) {
    const double a = -12.0, h = (x - a) / intervals;
    auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
    double s = pdf(a) + pdf(x);
    for (int i = 1; i < intervals; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

}  // namespace cmsa::reference
