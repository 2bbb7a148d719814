#include <algorithm>
#include <cmath>
#include <memory>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"
#include "eigen_maps.hpp"

namespace cmsa {

namespace {

// Copies between the feature-map layout and the windowed layout. `to_windows`
// selects the direction; `accumulate` adds instead of overwriting.
template <typename T>
void window_copy(const T* src, T* dst, std::int64_t N, std::int64_t H, std::int64_t W, std::int64_t C, int s, int t,
                 bool to_windows, bool accumulate) {
    const std::int64_t rows = H / s, cols = W / t;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t wr = 0; wr < rows; ++wr)
            for (std::int64_t wc = 0; wc < cols; ++wc) {
                const std::int64_t win = (n * rows + wr) * cols + wc;
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < t; ++j) {
                        const std::int64_t map_off = ((n * H + wr * s + i) * W + wc * t + j) * C;
                        const std::int64_t win_off = (win * s * t + i * t + j) * C;
                        const T* from = src + (to_windows ? map_off : win_off);
                        T* to = dst + (to_windows ? win_off : map_off);
                        if (accumulate) {
                            for (std::int64_t c = 0; c < C; ++c) to[c] += from[c];
                        } else {
                            std::copy(from, from + C, to);
                        }
                    }
            }
}

void check_tiling(std::int64_t H, std::int64_t W, int s, int t, const char* op) {
    if (s < 1 || t < 1 || H % s != 0 || W % t != 0) {
        throw ConfigError(std::string(op) + ": window does not tile the map (H=" + std::to_string(H) +
                          ", W=" + std::to_string(W) + ", s=" + std::to_string(s) + ", t=" + std::to_string(t) + ")");
    }
}

}  // namespace

template <typename T>
Var<T> window_partition(Var<T> x, int s, int t) {
    const auto& v = x.value();
    if (v.rank() != 4) throw ConfigError("window_partition: input must be N x H x W x C");
    const std::int64_t N = v.dim(0), H = v.dim(1), W = v.dim(2), C = v.dim(3);
    check_tiling(H, W, s, t, "window_partition");
    const std::int64_t nw = N * (H / s) * (W / t);
    if (s == H && t == W) return reshape(x, Shape{nw, static_cast<std::int64_t>(s) * t, C});
    BasicTensor<T> y({nw, static_cast<std::int64_t>(s) * t, C});
    window_copy(v.ptr(), y.ptr(), N, H, W, C, s, t, true, false);
    const int xid = x.id;
    return x.graph->record(std::move(y), {xid}, [=](Graph<T>& gr, int self) {
        window_copy(gr.grad_ref(self).ptr(), gr.grad_buffer(xid).ptr(), N, H, W, C, s, t, false, true);
    });
}

template <typename T>
Var<T> window_reverse(Var<T> windows, std::int64_t n, std::int64_t h, std::int64_t w, int s, int t) {
    const auto& v = windows.value();
    if (v.rank() != 3) throw ConfigError("window_reverse: input must be Nw x (s*t) x C");
    check_tiling(h, w, s, t, "window_reverse");
    const std::int64_t expected = n * (h / s) * (w / t);
    if (v.dim(0) != expected || v.dim(1) != static_cast<std::int64_t>(s) * t) {
        throw ConfigError("window_reverse: got " + shape_str(v.shape()) + ", expected " + std::to_string(expected) +
                          " windows of " + std::to_string(s * t) + " tokens");
    }
    const std::int64_t C = v.dim(2);
    if (s == h && t == w) return reshape(windows, Shape{n, h, w, C});
    BasicTensor<T> y({n, h, w, C});
    window_copy(v.ptr(), y.ptr(), n, h, w, C, s, t, false, false);
    const int wid = windows.id;
    return windows.graph->record(std::move(y), {wid}, [=](Graph<T>& gr, int self) {
        window_copy(gr.grad_ref(self).ptr(), gr.grad_buffer(wid).ptr(), n, h, w, C, s, t, true, true);
    });
}

template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, int heads) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    if (qv.rank() != 3 || kv.rank() != 3 || vv.rank() != 3) throw ConfigError("attention_core: operands must be B x L x C");
    const std::int64_t B = qv.dim(0), Lq = qv.dim(1), d = qv.dim(2);
    const std::int64_t Lk = kv.dim(1), dv = vv.dim(2);
    if (kv.dim(0) != B || vv.dim(0) != B) throw ConfigError("attention_core: window count mismatch between query and key");
    if (kv.dim(2) != d) throw ConfigError("attention_core: key width " + std::to_string(kv.dim(2)) + " != query width " + std::to_string(d));
    if (vv.dim(1) != Lk) throw ConfigError("attention_core: value length != key length");
    if (heads < 1 || d % heads != 0 || dv % heads != 0) {
        throw ConfigError("attention_core: widths d=" + std::to_string(d) + ", dv=" + std::to_string(dv) +
                          " not divisible by heads=" + std::to_string(heads));
    }
    const std::int64_t dh = d / heads, dvh = dv / heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    auto probs = std::make_shared<typename BasicTensor<T>::Storage>(static_cast<std::size_t>(B * heads * Lq * Lk));
    BasicTensor<T> out({B, Lq, dv});
    for (std::int64_t b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            auto P = detail::map(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
            P.noalias() = detail::csmap(qv.ptr() + b * Lq * d + h * dh, Lq, dh, d) *
                          detail::csmap(kv.ptr() + b * Lk * d + h * dh, Lk, dh, d).transpose();
            for (std::int64_t i = 0; i < Lq; ++i) {
                T* row = P.data() + i * Lk;
                const T mx = *std::max_element(row, row + Lk) * sc;
                detail::blockwise(Lk, [&](std::int64_t j, auto v) { v(row + j) = (v(row + j) * sc - mx).exp(); });
                const T inv = static_cast<T>(1.0 / detail::sum_double(row, Lk));
                detail::blockwise(Lk, [&](std::int64_t j, auto v) { v(row + j) *= inv; });
            }
            detail::smap(out.ptr() + b * Lq * dv + h * dvh, Lq, dvh, dv).noalias() =
                P * detail::csmap(vv.ptr() + b * Lk * dv + h * dvh, Lk, dvh, dv);
        }

    const int qid = q.id, kid = k.id, vid = v.id;
    return q.graph->record(std::move(out), {qid, kid, vid}, [=](Graph<T>& gr, int self) {
        const T* go = gr.grad_ref(self).ptr();
        const T* qp = gr.value(qid).ptr();
        const T* kp = gr.value(kid).ptr();
        const T* vp = gr.value(vid).ptr();
        T* gq = gr.requires_grad(qid) ? gr.grad_buffer(qid).ptr() : nullptr;
        T* gk = gr.requires_grad(kid) ? gr.grad_buffer(kid).ptr() : nullptr;
        T* gv = gr.requires_grad(vid) ? gr.grad_buffer(vid).ptr() : nullptr;
        detail::RowMat<T> dP(Lq, Lk);
        for (std::int64_t b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h) {
                auto P = detail::cmap(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
                auto dO = detail::csmap(go + b * Lq * dv + h * dvh, Lq, dvh, dv);
                auto Vh = detail::csmap(vp + b * Lk * dv + h * dvh, Lk, dvh, dv);
                if (gv) detail::smap(gv + b * Lk * dv + h * dvh, Lk, dvh, dv).noalias() += P.transpose() * dO;
                if (!gq && !gk) continue;
                dP.noalias() = dO * Vh.transpose();
                for (std::int64_t i = 0; i < Lq; ++i) {
                    const T* pr = P.data() + i * Lk;
                    T* dr = dP.data() + i * Lk;
                    const T dt = static_cast<T>(detail::dot_double(pr, dr, Lk));
                    detail::blockwise(Lk, [&](std::int64_t j, auto v) { v(dr + j) = v(pr + j) * (v(dr + j) - dt) * sc; });
                }
                if (gq)
                    detail::smap(gq + b * Lq * d + h * dh, Lq, dh, d).noalias() +=
                        dP * detail::csmap(kp + b * Lk * d + h * dh, Lk, dh, d);
                if (gk)
                    detail::smap(gk + b * Lk * d + h * dh, Lk, dh, d).noalias() +=
                        dP.transpose() * detail::csmap(qp + b * Lq * d + h * dh, Lq, dh, d);
            }
    });
}

#define CMSA_INSTANTIATE_ATTN(T)                                                              \
    template Var<T> window_partition(Var<T>, int, int);                                       \
    template Var<T> window_reverse(Var<T>, std::int64_t, std::int64_t, std::int64_t, int, int); \
    template Var<T> attention_core(Var<T>, Var<T>, Var<T>, int);

CMSA_INSTANTIATE_ATTN(float)
CMSA_INSTANTIATE_ATTN(double)

}  // namespace cmsa
