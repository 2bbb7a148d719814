#include "cmsa/window.hpp"

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"

namespace cmsa {

WindowGrid WindowGrid::tile(std::int64_t h, std::int64_t w, int s, int t) {
    if (s < 1 || t < 1 || s > h || t > w || h % s != 0 || w % t != 0) {
        throw ConfigError("window does not tile stage: H=" + std::to_string(h) + " W=" + std::to_string(w) +
                          " s=" + std::to_string(s) + " t=" + std::to_string(t));
    }
    return WindowGrid{s, t, h / s, w / t};
}

template <typename T>
Var<T> mh_window_attention(Var<T> q, Var<T> k, Var<T> v, int sq, int tq, int heads) {
    if (q.value().rank() != 4 || k.value().rank() != 4 || v.value().rank() != 4)
        throw ConfigError("mh_window_attention: Q, K, V must be N x H x W x C");
    const std::int64_t N = q.dim(0), H = q.dim(1), W = q.dim(2);
    const std::int64_t Hk = k.dim(1), Wk = k.dim(2);
    if (k.dim(0) != N || v.dim(0) != N) throw ConfigError("mh_window_attention: batch mismatch");
    if (v.dim(1) != Hk || v.dim(2) != Wk) throw ConfigError("mh_window_attention: key and value maps differ in size");
    if (!((Hk == H || 2 * Hk == H) && (Wk == W || 2 * Wk == W))) {
        throw ConfigError("mh_window_attention: key map " + std::to_string(Hk) + "x" + std::to_string(Wk) +
                          " must equal or halve the query map " + std::to_string(H) + "x" + std::to_string(W));
    }
    const WindowGrid qg = WindowGrid::tile(H, W, sq, tq);
    if ((static_cast<std::int64_t>(sq) * Hk) % H != 0 || (static_cast<std::int64_t>(tq) * Wk) % W != 0) {
        throw ConfigError("mh_window_attention: query window " + std::to_string(sq) + "x" + std::to_string(tq) +
                          " has no matching key window on the reduced map");
    }
    const int sk = static_cast<int>(sq * Hk / H), tk = static_cast<int>(tq * Wk / W);
    const WindowGrid kg = WindowGrid::tile(Hk, Wk, sk, tk);
    if (kg.rows != qg.rows || kg.cols != qg.cols) {
        throw ConfigError("mh_window_attention: query grid " + std::to_string(qg.rows) + "x" + std::to_string(qg.cols) +
                          " does not match key grid " + std::to_string(kg.rows) + "x" + std::to_string(kg.cols));
    }
    auto qw = window_partition(q, sq, tq);
    auto kw = window_partition(k, sk, tk);
    auto vw = window_partition(v, sk, tk);
    auto ow = attention_core(qw, kw, vw, heads);
    return window_reverse(ow, N, H, W, sq, tq);
}

template Var<float> mh_window_attention(Var<float>, Var<float>, Var<float>, int, int, int);
template Var<double> mh_window_attention(Var<double>, Var<double>, Var<double>, int, int, int);

}  // namespace cmsa
