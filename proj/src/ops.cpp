#include "cmsa/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "cmsa/errors.hpp"
#include "eigen_maps.hpp"

namespace cmsa {

namespace {

template <typename T>
void check_same_graph(Var<T> a, Var<T> b, const char* op) {
    if (a.graph != b.graph) throw UsageError(std::string(op) + ": operands belong to different graphs");
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
    check_same_graph(a, b, op);
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
    T* d = dst.ptr();
    const T* x = src.ptr();
    detail::blockwise(dst.numel(), [&](std::int64_t i, auto v) { v(d + i) += v(x + i); });
}

std::int64_t leading(const Shape& s) {
    std::int64_t n = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
    return n;
}

struct ConvGeometry {
    std::int64_t n, h, w, cin, kh, kw, cout, ho, wo;
    int stride, pad, groups;
};

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& x, const BasicTensor<T>& k, const Conv2dOptions& o) {
    if (x.rank() != 4) throw ConfigError("conv2d: input must be N x H x W x C, got " + shape_str(x.shape()));
    if (k.rank() != 4) throw ConfigError("conv2d: kernel must be kh x kw x Cin/groups x Cout, got " + shape_str(k.shape()));
    if (o.stride < 1 || o.padding < 0 || o.groups < 1) throw ConfigError("conv2d: invalid stride/padding/groups");
    ConvGeometry g{};
    g.n = x.dim(0);
    g.h = x.dim(1);
    g.w = x.dim(2);
    g.cin = x.dim(3);
    g.kh = k.dim(0);
    g.kw = k.dim(1);
    g.cout = k.dim(3);
    g.stride = o.stride;
    g.pad = o.padding;
    g.groups = o.groups;
    if (g.cin % o.groups != 0) {
        throw ConfigError("conv2d: input channels Cin=" + std::to_string(g.cin) + " not divisible by groups=" +
                          std::to_string(o.groups));
    }
    if (g.cout % o.groups != 0) {
        throw ConfigError("conv2d: output channels Cout=" + std::to_string(g.cout) + " not divisible by groups=" +
                          std::to_string(o.groups));
    }
    if (k.dim(2) != g.cin / o.groups) {
        throw ConfigError("conv2d: kernel input-channel dimension " + std::to_string(k.dim(2)) + " != Cin/groups=" +
                          std::to_string(g.cin / o.groups));
    }
    const std::int64_t hh = g.h + 2 * g.pad - g.kh;
    const std::int64_t ww = g.w + 2 * g.pad - g.kw;
    if (hh < 0 || ww < 0) {
        throw ConfigError("conv2d: zero-size output for input " + shape_str(x.shape()) + " kernel " +
                          shape_str(k.shape()) + " padding " + std::to_string(g.pad));
    }
    g.ho = hh / g.stride + 1;
    g.wo = ww / g.stride + 1;
    return g;
}

// out[n,oh,ow,c] = sum_ij x[n, oh*s-p+i, ow*s-p+j, c] * k[i,j,c]
template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* k, T* y) {
    const auto C = g.cin;
    for (std::int64_t n = 0; n < g.n; ++n) {
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                T* out = y + ((n * g.ho + oh) * g.wo + ow) * C;
                for (std::int64_t i = 0; i < g.kh; ++i) {
                    const std::int64_t ih = oh * g.stride - g.pad + i;
                    if (ih < 0 || ih >= g.h) continue;
                    for (std::int64_t j = 0; j < g.kw; ++j) {
                        const std::int64_t iw = ow * g.stride - g.pad + j;
                        if (iw < 0 || iw >= g.w) continue;
                        const T* xp = x + ((n * g.h + ih) * g.w + iw) * C;
                        const T* kp = k + (i * g.kw + j) * C;
                        for (std::int64_t c = 0; c < C; ++c) out[c] += xp[c] * kp[c];
                    }
                }
            }
        }
    }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* k, const T* gy, T* gx, T* gk) {
    const auto C = g.cin;
    for (std::int64_t n = 0; n < g.n; ++n) {
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                const T* go = gy + ((n * g.ho + oh) * g.wo + ow) * C;
                for (std::int64_t i = 0; i < g.kh; ++i) {
                    const std::int64_t ih = oh * g.stride - g.pad + i;
                    if (ih < 0 || ih >= g.h) continue;
                    for (std::int64_t j = 0; j < g.kw; ++j) {
                        const std::int64_t iw = ow * g.stride - g.pad + j;
                        if (iw < 0 || iw >= g.w) continue;
                        const std::int64_t xoff = ((n * g.h + ih) * g.w + iw) * C;
                        const std::int64_t koff = (i * g.kw + j) * C;
                        if (gx) {
                            T* dxp = gx + xoff;
                            const T* kp = k + koff;
                            for (std::int64_t c = 0; c < C; ++c) dxp[c] += go[c] * kp[c];
                        }
                        if (gk) {
                            T* dkp = gk + koff;
                            const T* xp = x + xoff;
                            for (std::int64_t c = 0; c < C; ++c) dkp[c] += go[c] * xp[c];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void general_conv_forward(const ConvGeometry& g, const T* x, const T* k, T* y) {
    const auto cpg_in = g.cin / g.groups;
    const auto cpg_out = g.cout / g.groups;
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t oh = 0; oh < g.ho; ++oh)
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                T* out = y + ((n * g.ho + oh) * g.wo + ow) * g.cout;
                for (std::int64_t i = 0; i < g.kh; ++i) {
                    const std::int64_t ih = oh * g.stride - g.pad + i;
                    if (ih < 0 || ih >= g.h) continue;
                    for (std::int64_t j = 0; j < g.kw; ++j) {
                        const std::int64_t iw = ow * g.stride - g.pad + j;
                        if (iw < 0 || iw >= g.w) continue;
                        const T* xp = x + ((n * g.h + ih) * g.w + iw) * g.cin;
                        const T* kp = k + (i * g.kw + j) * cpg_in * g.cout;
                        for (std::int64_t co = 0; co < g.cout; ++co) {
                            const std::int64_t grp = co / cpg_out;
                            T acc = 0;
                            for (std::int64_t ci = 0; ci < cpg_in; ++ci)
                                acc += xp[grp * cpg_in + ci] * kp[ci * g.cout + co];
                            out[co] += acc;
                        }
                    }
                }
            }
}

template <typename T>
void general_conv_backward(const ConvGeometry& g, const T* x, const T* k, const T* gy, T* gx, T* gk) {
    const auto cpg_in = g.cin / g.groups;
    const auto cpg_out = g.cout / g.groups;
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t oh = 0; oh < g.ho; ++oh)
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                const T* go = gy + ((n * g.ho + oh) * g.wo + ow) * g.cout;
                for (std::int64_t i = 0; i < g.kh; ++i) {
                    const std::int64_t ih = oh * g.stride - g.pad + i;
                    if (ih < 0 || ih >= g.h) continue;
                    for (std::int64_t j = 0; j < g.kw; ++j) {
                        const std::int64_t iw = ow * g.stride - g.pad + j;
                        if (iw < 0 || iw >= g.w) continue;
                        const std::int64_t xoff = ((n * g.h + ih) * g.w + iw) * g.cin;
                        const std::int64_t koff = (i * g.kw + j) * cpg_in * g.cout;
                        for (std::int64_t co = 0; co < g.cout; ++co) {
                            const std::int64_t grp = co / cpg_out;
                            for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
                                const std::int64_t xi = xoff + grp * cpg_in + ci;
                                const std::int64_t ki = koff + ci * g.cout + co;
                                if (gx) gx[xi] += go[co] * k[ki];
                                if (gk) gk[ki] += go[co] * x[xi];
                            }
                        }
                    }
                }
            }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, Conv2dOptions options) {
    check_same_graph(input, kernel, "conv2d");
    const auto& x = input.value();
    const auto& k = kernel.value();
    const ConvGeometry g = conv_geometry(x, k, options);
    if (bias) {
        check_same_graph(input, *bias, "conv2d");
        if (bias->value().rank() != 1 || bias->value().dim(0) != g.cout) {
            throw ConfigError("conv2d: bias must have Cout=" + std::to_string(g.cout) + " entries, got " +
                              shape_str(bias->value().shape()));
        }
    }
    const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1;
    const bool depthwise = g.groups == g.cin && g.cout == g.cin;

    BasicTensor<T> y({g.n, g.ho, g.wo, g.cout});
    const std::int64_t rows = g.n * g.ho * g.wo;
    if (bias) {
        const T* b = bias->value().ptr();
        for (std::int64_t r = 0; r < rows; ++r) std::copy(b, b + g.cout, y.ptr() + r * g.cout);
    }
    if (pointwise) {
        detail::map(y.ptr(), rows, g.cout).noalias() +=
            detail::cmap(x.ptr(), rows, g.cin) * detail::cmap(k.ptr(), g.cin, g.cout);
    } else if (depthwise) {
        depthwise_forward(g, x.ptr(), k.ptr(), y.ptr());
    } else {
        general_conv_forward(g, x.ptr(), k.ptr(), y.ptr());
    }

    std::vector<int> ins{input.id, kernel.id};
    const int bias_id = bias ? bias->id : -1;
    if (bias) ins.push_back(bias_id);
    const int xid = input.id, kid = kernel.id;
    return input.graph->record(std::move(y), std::move(ins), [g, xid, kid, bias_id, pointwise, depthwise](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        const auto& xv = gr.value(xid);
        const auto& kv = gr.value(kid);
        const std::int64_t rows = g.n * g.ho * g.wo;
        T* gx = gr.requires_grad(xid) ? gr.grad_buffer(xid).ptr() : nullptr;
        T* gk = gr.requires_grad(kid) ? gr.grad_buffer(kid).ptr() : nullptr;
        if (pointwise) {
            auto dy = detail::cmap(gy.ptr(), rows, g.cout);
            if (gx) detail::map(gx, rows, g.cin).noalias() += dy * detail::cmap(kv.ptr(), g.cin, g.cout).transpose();
            if (gk) detail::map(gk, g.cin, g.cout).noalias() += detail::cmap(xv.ptr(), rows, g.cin).transpose() * dy;
        } else if (depthwise) {
            depthwise_backward(g, xv.ptr(), kv.ptr(), gy.ptr(), gx, gk);
        } else {
            general_conv_backward(g, xv.ptr(), kv.ptr(), gy.ptr(), gx, gk);
        }
        if (bias_id >= 0 && gr.requires_grad(bias_id)) {
            T* gb = gr.grad_buffer(bias_id).ptr();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* row = gy.ptr() + r * g.cout;
                for (std::int64_t c = 0; c < g.cout; ++c) gb[c] += row[c];
            }
        }
    });
}

template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, std::optional<std::type_identity_t<Var<T>>> bias) {
    check_same_graph(input, weight, "linear");
    const auto& x = input.value();
    const auto& w = weight.value();
    if (w.rank() != 2) throw ConfigError("linear: weight must be Din x Dout, got " + shape_str(w.shape()));
    if (x.rank() < 1 || x.dim(-1) != w.dim(0)) {
        throw ConfigError("linear: input last dimension " + std::to_string(x.rank() ? x.dim(-1) : 0) +
                          " != weight Din=" + std::to_string(w.dim(0)));
    }
    const std::int64_t din = w.dim(0), dout = w.dim(1), rows = leading(x.shape());
    if (bias) {
        check_same_graph(input, *bias, "linear");
        if (bias->value().rank() != 1 || bias->value().dim(0) != dout)
            throw ConfigError("linear: bias must have Dout=" + std::to_string(dout) + " entries");
    }
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    BasicTensor<T> y(out_shape);
    if (bias) {
        const T* b = bias->value().ptr();
        for (std::int64_t r = 0; r < rows; ++r) std::copy(b, b + dout, y.ptr() + r * dout);
    }
    detail::map(y.ptr(), rows, dout).noalias() += detail::cmap(x.ptr(), rows, din) * detail::cmap(w.ptr(), din, dout);

    std::vector<int> ins{input.id, weight.id};
    const int bias_id = bias ? bias->id : -1;
    if (bias) ins.push_back(bias_id);
    const int xid = input.id, wid = weight.id;
    return input.graph->record(std::move(y), std::move(ins), [=](Graph<T>& gr, int self) {
        auto dy = detail::cmap(gr.grad_ref(self).ptr(), rows, dout);
        if (gr.requires_grad(xid))
            detail::map(gr.grad_buffer(xid).ptr(), rows, din).noalias() +=
                dy * detail::cmap(gr.value(wid).ptr(), din, dout).transpose();
        if (gr.requires_grad(wid))
            detail::map(gr.grad_buffer(wid).ptr(), din, dout).noalias() +=
                detail::cmap(gr.value(xid).ptr(), rows, din).transpose() * dy;
        if (bias_id >= 0 && gr.requires_grad(bias_id))
            detail::map(gr.grad_buffer(bias_id).ptr(), 1, dout).noalias() += dy.colwise().sum();
    });
}

template <typename T>
Var<T> softmax_last(Var<T> input) {
    const auto& x = input.value();
    if (x.rank() < 1) throw ConfigError("softmax_last: input must have at least one dimension");
    const std::int64_t len = x.dim(-1), rows = leading(x.shape());
    BasicTensor<T> y(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * len;
        T* yr = y.ptr() + r * len;
        const T mx = *std::max_element(xr, xr + len);
        detail::blockwise(len, [&](std::int64_t i, auto v) { v(yr + i) = (v(xr + i) - mx).exp(); });
        const T inv = static_cast<T>(1.0 / detail::sum_double(yr, len));
        detail::blockwise(len, [&](std::int64_t i, auto v) { v(yr + i) *= inv; });
    }
    const int xid = input.id;
    return input.graph->record(std::move(y), {xid}, [len, rows, xid](Graph<T>& gr, int self) {
        const T* yv = gr.value(self).ptr();
        const T* gy = gr.grad_ref(self).ptr();
        T* gx = gr.grad_buffer(xid).ptr();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* yr = yv + r * len;
            const T* dr = gy + r * len;
            T* out = gx + r * len;
            const T dot = static_cast<T>(detail::dot_double(yr, dr, len));
            detail::blockwise(len, [&](std::int64_t i, auto v) { v(out + i) += v(yr + i) * (v(dr + i) - dot); });
        }
    });
}

template <typename T>
Var<T> gelu(Var<T> input) {
    const auto& x = input.value();
    BasicTensor<T> y(x.shape());
    const T half = static_cast<T>(0.5), rs2 = static_cast<T>(std::numbers::sqrt2 / 2);
    const T* xp = x.ptr();
    T* yp = y.ptr();
    detail::blockwise(x.numel(), [&](std::int64_t i, auto v) {
        v(yp + i) = half * v(xp + i) * (T{1} + (v(xp + i) * rs2).erf());
    });
    const int xid = input.id;
    return input.graph->record(std::move(y), {xid}, [xid, half, rs2](Graph<T>& gr, int self) {
        const auto& xv = gr.value(xid);
        const T* xp = xv.ptr();
        const T* gy = gr.grad_ref(self).ptr();
        T* gx = gr.grad_buffer(xid).ptr();
        const T k = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        detail::blockwise(xv.numel(), [&](std::int64_t i, auto v) {
            const auto xi = v(xp + i);
            v(gx + i) += v(gy + i) * (half * (T{1} + (xi * rs2).erf()) + xi * k * (-half * xi.square()).exp());
        });
    });
}

template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BasicTensor<T>& running_mean, BasicTensor<T>& running_var,
                  BatchNormOptions options) {
    check_same_graph(input, gamma, "batch_norm");
    check_same_graph(input, beta, "batch_norm");
    const auto& x = input.value();
    if (x.rank() != 4) throw ConfigError("batch_norm: input must be N x H x W x C, got " + shape_str(x.shape()));
    const std::int64_t C = x.dim(3), rows = leading(x.shape());
    for (const BasicTensor<T>* t : {&gamma.value(), &beta.value(), static_cast<const BasicTensor<T>*>(&running_mean),
                                    static_cast<const BasicTensor<T>*>(&running_var)}) {
        if (t->rank() != 1 || t->dim(0) != C)
            throw ConfigError("batch_norm: parameter length " + shape_str(t->shape()) + " != C=" + std::to_string(C));
    }
    auto mean_v = std::make_shared<std::vector<T>>(C);
    auto rstd_v = std::make_shared<std::vector<T>>(C);
    if (options.training) {
        std::vector<double> s(C, 0.0), s2(C, 0.0);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = x.ptr() + r * C;
            for (std::int64_t c = 0; c < C; ++c) s[c] += xr[c];
        }
        for (std::int64_t c = 0; c < C; ++c) s[c] /= static_cast<double>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = x.ptr() + r * C;
            for (std::int64_t c = 0; c < C; ++c) {
                const double d = xr[c] - s[c];
                s2[c] += d * d;
            }
        }
        const double m = options.momentum;
        for (std::int64_t c = 0; c < C; ++c) {
            const double var = s2[c] / static_cast<double>(rows);
            (*mean_v)[c] = static_cast<T>(s[c]);
            (*rstd_v)[c] = static_cast<T>(1.0 / std::sqrt(var + options.epsilon));
            const double unbiased = rows > 1 ? s2[c] / static_cast<double>(rows - 1) : var;
            running_mean[c] = static_cast<T>((1.0 - m) * running_mean[c] + m * s[c]);
            running_var[c] = static_cast<T>((1.0 - m) * running_var[c] + m * unbiased);
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            if (running_var[c] < 0) throw DataError("batch_norm: negative running variance");
            (*mean_v)[c] = running_mean[c];
            (*rstd_v)[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + options.epsilon));
        }
    }
    BasicTensor<T> y(x.shape());
    const T* g = gamma.value().ptr();
    const T* b = beta.value().ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * C;
        T* yr = y.ptr() + r * C;
        for (std::int64_t c = 0; c < C; ++c) yr[c] = (xr[c] - (*mean_v)[c]) * (*rstd_v)[c] * g[c] + b[c];
    }
    const int xid = input.id, gid = gamma.id, bid = beta.id;
    const bool training = options.training;
    return input.graph->record(std::move(y), {xid, gid, bid}, [=](Graph<T>& gr, int self) {
        const auto& xv = gr.value(xid);
        const T* gy = gr.grad_ref(self).ptr();
        const T* gv = gr.value(gid).ptr();
        const auto& mu = *mean_v;
        const auto& rs = *rstd_v;
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.ptr() + r * C;
            const T* gr_ = gy + r * C;
            for (std::int64_t c = 0; c < C; ++c) {
                sum_dy[c] += gr_[c];
                sum_dy_xhat[c] += static_cast<double>(gr_[c]) * (xr[c] - mu[c]) * rs[c];
            }
        }
        if (gr.requires_grad(gid)) {
            T* gg = gr.grad_buffer(gid).ptr();
            for (std::int64_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (gr.requires_grad(bid)) {
            T* gb = gr.grad_buffer(bid).ptr();
            for (std::int64_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
        }
        if (gr.requires_grad(xid)) {
            T* gx = gr.grad_buffer(xid).ptr();
            const double inv_n = 1.0 / static_cast<double>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* xr = xv.ptr() + r * C;
                const T* gr_ = gy + r * C;
                T* out = gx + r * C;
                for (std::int64_t c = 0; c < C; ++c) {
                    if (training) {
                        const double xhat = (xr[c] - mu[c]) * rs[c];
                        out[c] += static_cast<T>(gv[c] * rs[c] *
                                                 (gr_[c] - sum_dy[c] * inv_n - xhat * sum_dy_xhat[c] * inv_n));
                    } else {
                        out[c] += gr_[c] * gv[c] * rs[c];
                    }
                }
            }
        }
    });
}

template <typename T>
Var<T> layer_norm(Var<T> input, Var<T> gamma, Var<T> beta, double epsilon) {
    check_same_graph(input, gamma, "layer_norm");
    check_same_graph(input, beta, "layer_norm");
    const auto& x = input.value();
    const std::int64_t C = x.dim(-1), rows = leading(x.shape());
    if (gamma.value().rank() != 1 || gamma.value().dim(0) != C || beta.value().rank() != 1 || beta.value().dim(0) != C)
        throw ConfigError("layer_norm: parameter length does not match C=" + std::to_string(C));
    auto mean_v = std::make_shared<std::vector<T>>(rows);
    auto rstd_v = std::make_shared<std::vector<T>>(rows);
    BasicTensor<T> y(x.shape());
    const T* g = gamma.value().ptr();
    const T* b = beta.value().ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * C;
        double s = 0, s2 = 0;
        for (std::int64_t c = 0; c < C; ++c) s += xr[c];
        const double mu = s / static_cast<double>(C);
        for (std::int64_t c = 0; c < C; ++c) s2 += (xr[c] - mu) * (xr[c] - mu);
        const double rs = 1.0 / std::sqrt(s2 / static_cast<double>(C) + epsilon);
        (*mean_v)[r] = static_cast<T>(mu);
        (*rstd_v)[r] = static_cast<T>(rs);
        T* yr = y.ptr() + r * C;
        for (std::int64_t c = 0; c < C; ++c) yr[c] = static_cast<T>((xr[c] - mu) * rs) * g[c] + b[c];
    }
    const int xid = input.id, gid = gamma.id, bid = beta.id;
    return input.graph->record(std::move(y), {xid, gid, bid}, [=](Graph<T>& gr, int self) {
        const auto& xv = gr.value(xid);
        const T* gy = gr.grad_ref(self).ptr();
        const T* gv = gr.value(gid).ptr();
        T* gg = gr.requires_grad(gid) ? gr.grad_buffer(gid).ptr() : nullptr;
        T* gb = gr.requires_grad(bid) ? gr.grad_buffer(bid).ptr() : nullptr;
        T* gx = gr.requires_grad(xid) ? gr.grad_buffer(xid).ptr() : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.ptr() + r * C;
            const T* gyr = gy + r * C;
            const double mu = (*mean_v)[r], rs = (*rstd_v)[r];
            double mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double xhat = (xr[c] - mu) * rs;
                const double dxhat = static_cast<double>(gyr[c]) * gv[c];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                if (gg) gg[c] += static_cast<T>(gyr[c] * xhat);
                if (gb) gb[c] += gyr[c];
            }
            if (!gx) continue;
            mean_dxhat /= static_cast<double>(C);
            mean_dxhat_xhat /= static_cast<double>(C);
            T* out = gx + r * C;
            for (std::int64_t c = 0; c < C; ++c) {
                const double xhat = (xr[c] - mu) * rs;
                const double dxhat = static_cast<double>(gyr[c]) * gv[c];
                out[c] += static_cast<T>(rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
        }
    });
}

template <typename T>
Var<T> avg_pool2d(Var<T> input, int kernel, int stride) {
    const auto& x = input.value();
    if (x.rank() != 4) throw ConfigError("avg_pool2d: input must be N x H x W x C");
    if (kernel < 1 || stride < 1) throw ConfigError("avg_pool2d: kernel and stride must be positive");
    const std::int64_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (H % stride != 0 || W % stride != 0 || H < kernel || W < kernel) {
        throw ConfigError("avg_pool2d: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                          " not divisible by stride " + std::to_string(stride));
    }
    const std::int64_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
    BasicTensor<T> y({N, Ho, Wo, C});
    const T inv = static_cast<T>(1.0 / (kernel * kernel));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oh = 0; oh < Ho; ++oh)
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                T* out = y.ptr() + ((n * Ho + oh) * Wo + ow) * C;
                for (int i = 0; i < kernel; ++i)
                    for (int j = 0; j < kernel; ++j) {
                        const T* xp = x.ptr() + ((n * H + oh * stride + i) * W + ow * stride + j) * C;
                        for (std::int64_t c = 0; c < C; ++c) out[c] += xp[c];
                    }
                for (std::int64_t c = 0; c < C; ++c) out[c] *= inv;
            }
    const int xid = input.id;
    return input.graph->record(std::move(y), {xid}, [=](Graph<T>& gr, int self) {
        const T* gy = gr.grad_ref(self).ptr();
        T* gx = gr.grad_buffer(xid).ptr();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    const T* go = gy + ((n * Ho + oh) * Wo + ow) * C;
                    for (int i = 0; i < kernel; ++i)
                        for (int j = 0; j < kernel; ++j) {
                            T* dx = gx + ((n * H + oh * stride + i) * W + ow * stride + j) * C;
                            for (std::int64_t c = 0; c < C; ++c) dx[c] += go[c] * inv;
                        }
                }
    });
}

template <typename T>
Var<T> global_avg_pool(Var<T> input) {
    const auto& x = input.value();
    if (x.rank() != 4) throw ConfigError("global_avg_pool: input must be N x H x W x C");
    const std::int64_t N = x.dim(0), HW = x.dim(1) * x.dim(2), C = x.dim(3);
    BasicTensor<T> y({N, C});
    for (std::int64_t n = 0; n < N; ++n) {
        std::vector<double> acc(C, 0.0);
        for (std::int64_t p = 0; p < HW; ++p) {
            const T* xp = x.ptr() + (n * HW + p) * C;
            for (std::int64_t c = 0; c < C; ++c) acc[c] += xp[c];
        }
        for (std::int64_t c = 0; c < C; ++c) y[n * C + c] = static_cast<T>(acc[c] / static_cast<double>(HW));
    }
    const int xid = input.id;
    return input.graph->record(std::move(y), {xid}, [=](Graph<T>& gr, int self) {
        const T* gy = gr.grad_ref(self).ptr();
        T* gx = gr.grad_buffer(xid).ptr();
        const T inv = static_cast<T>(1.0 / static_cast<double>(HW));
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t p = 0; p < HW; ++p) {
                T* dx = gx + (n * HW + p) * C;
                for (std::int64_t c = 0; c < C; ++c) dx[c] += gy[n * C + c] * inv;
            }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "add");
    BasicTensor<T> y(a.shape());
    const T *ap = a.value().ptr(), *bp = b.value().ptr();
    T* yp = y.ptr();
    detail::blockwise(y.numel(), [&](std::int64_t i, auto v) { v(yp + i) = v(ap + i) + v(bp + i); });
    const int aid = a.id, bid = b.id;
    return a.graph->record(std::move(y), {aid, bid}, [aid, bid](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        if (gr.requires_grad(aid)) add_into(gr.grad_buffer(aid), gy);
        if (gr.requires_grad(bid)) add_into(gr.grad_buffer(bid), gy);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "sub");
    BasicTensor<T> y(a.shape());
    const T *ap = a.value().ptr(), *bp = b.value().ptr();
    T* yp = y.ptr();
    detail::blockwise(y.numel(), [&](std::int64_t i, auto v) { v(yp + i) = v(ap + i) - v(bp + i); });
    const int aid = a.id, bid = b.id;
    return a.graph->record(std::move(y), {aid, bid}, [aid, bid](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        if (gr.requires_grad(aid)) add_into(gr.grad_buffer(aid), gy);
        if (gr.requires_grad(bid)) {
            T* gb = gr.grad_buffer(bid).ptr();
            const T* g = gy.ptr();
            detail::blockwise(gy.numel(), [&](std::int64_t i, auto v) { v(gb + i) -= v(g + i); });
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "mul");
    BasicTensor<T> y(a.shape());
    const T *ap = a.value().ptr(), *bp = b.value().ptr();
    T* yp = y.ptr();
    detail::blockwise(y.numel(), [&](std::int64_t i, auto v) { v(yp + i) = v(ap + i) * v(bp + i); });
    const int aid = a.id, bid = b.id;
    return a.graph->record(std::move(y), {aid, bid}, [aid, bid](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        const T* g = gy.ptr();
        const T* av = gr.value(aid).ptr();
        const T* bv = gr.value(bid).ptr();
        if (gr.requires_grad(aid)) {
            T* ga = gr.grad_buffer(aid).ptr();
            detail::blockwise(gy.numel(), [&](std::int64_t i, auto v) { v(ga + i) += v(g + i) * v(bv + i); });
        }
        if (gr.requires_grad(bid)) {
            T* gb = gr.grad_buffer(bid).ptr();
            detail::blockwise(gy.numel(), [&](std::int64_t i, auto v) { v(gb + i) += v(g + i) * v(av + i); });
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, double factor) {
    const T f = static_cast<T>(factor);
    BasicTensor<T> y(a.shape());
    const T* ap = a.value().ptr();
    T* yp = y.ptr();
    detail::blockwise(y.numel(), [&](std::int64_t i, auto v) { v(yp + i) = v(ap + i) * f; });
    const int aid = a.id;
    return a.graph->record(std::move(y), {aid}, [aid, f](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        const T* g = gy.ptr();
        T* ga = gr.grad_buffer(aid).ptr();
        detail::blockwise(gy.numel(), [&](std::int64_t i, auto v) { v(ga + i) += v(g + i) * f; });
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    double s = 0;
    for (T v : a.value().data()) s += v;
    const int aid = a.id;
    return a.graph->record(BasicTensor<T>(Shape{}, static_cast<T>(s)), {aid}, [aid](Graph<T>& gr, int self) {
        const T g = gr.grad_ref(self)[0];
        for (auto& v : gr.grad_buffer(aid).data()) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    if (shape_numel(shape) != a.value().numel()) {
        throw ConfigError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    }
    BasicTensor<T> y = a.value().reshaped(std::move(shape));
    const int aid = a.id;
    return a.graph->record(std::move(y), {aid}, [aid](Graph<T>& gr, int self) {
        const auto& gy = gr.grad_ref(self);
        T* ga = gr.grad_buffer(aid).ptr();
        for (std::int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    });
}

template <typename T>
Var<T> concat_last(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ConfigError("concat_last: no operands");
    const Shape& first = parts[0].shape();
    const std::int64_t rows = leading(first);
    std::vector<std::int64_t> widths;
    std::vector<int> ins;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_same_graph(parts[0], p, "concat_last");
        const Shape& s = p.shape();
        if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
            throw ConfigError("concat_last: leading dimensions differ, " + shape_str(first) + " vs " + shape_str(s));
        }
        widths.push_back(s.back());
        ins.push_back(p.id);
        total += s.back();
    }
    Shape out_shape = first;
    out_shape.back() = total;
    BasicTensor<T> y(out_shape);
    std::int64_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const T* src = parts[k].value().ptr();
        const auto w = widths[k];
        for (std::int64_t r = 0; r < rows; ++r) std::copy(src + r * w, src + (r + 1) * w, y.ptr() + r * total + off);
        off += w;
    }
    return parts[0].graph->record(std::move(y), ins, [ins, widths, rows, total](Graph<T>& gr, int self) {
        const T* gy = gr.grad_ref(self).ptr();
        std::int64_t off = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
            const auto w = widths[k];
            if (gr.requires_grad(ins[k])) {
                T* g = gr.grad_buffer(ins[k]).ptr();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* src = gy + r * total + off;
                    T* dst = g + r * w;
                    for (std::int64_t c = 0; c < w; ++c) dst[c] += src[c];
                }
            }
            off += w;
        }
    });
}

template <typename T>
Var<T> slice_last(Var<T> a, std::int64_t start, std::int64_t length) {
    const auto& x = a.value();
    const std::int64_t C = x.dim(-1), rows = leading(x.shape());
    if (start < 0 || length < 1 || start + length > C) {
        throw ConfigError("slice_last: channels [" + std::to_string(start) + ", " + std::to_string(start + length) +
                          ") out of range for width " + std::to_string(C));
    }
    Shape out_shape = x.shape();
    out_shape.back() = length;
    BasicTensor<T> y(out_shape);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy(x.ptr() + r * C + start, x.ptr() + r * C + start + length, y.ptr() + r * length);
    const int aid = a.id;
    return a.graph->record(std::move(y), {aid}, [=](Graph<T>& gr, int self) {
        const T* gy = gr.grad_ref(self).ptr();
        T* g = gr.grad_buffer(aid).ptr();
        for (std::int64_t r = 0; r < rows; ++r) {
            T* dst = g + r * C + start;
            const T* src = gy + r * length;
            for (std::int64_t c = 0; c < length; ++c) dst[c] += src[c];
        }
    });
}

template <typename T>
Var<T> cross_entropy_smoothed(Var<T> logits, std::span<const int> labels, double smoothing) {
    const auto& z = logits.value();
    if (z.rank() != 2) throw ConfigError("cross_entropy_smoothed: logits must be N x K, got " + shape_str(z.shape()));
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("cross_entropy_smoothed: smoothing must be in [0, 1)");
    const std::int64_t N = z.dim(0), K = z.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N)
        throw ConfigError("cross_entropy_smoothed: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(N) + " rows");
    for (int l : labels)
        if (l < 0 || l >= K)
            throw DataError("cross_entropy_smoothed: label " + std::to_string(l) + " outside [0, " + std::to_string(K) + ")");
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N * K));
    double total = 0;
    const double off = smoothing / static_cast<double>(K);
    for (std::int64_t n = 0; n < N; ++n) {
        const T* zr = z.ptr() + n * K;
        double mx = zr[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(zr[k]));
        double s = 0;
        for (std::int64_t k = 0; k < K; ++k) s += std::exp(zr[k] - mx);
        const double lse = mx + std::log(s);
        for (std::int64_t k = 0; k < K; ++k) {
            const double logp = zr[k] - lse;
            (*probs)[n * K + k] = std::exp(logp);
            const double q = off + (k == labels[n] ? 1.0 - smoothing : 0.0);
            total -= q * logp;
        }
    }
    std::vector<int> lab(labels.begin(), labels.end());
    const int zid = logits.id;
    return logits.graph->record(BasicTensor<T>(Shape{}, static_cast<T>(total / static_cast<double>(N))), {zid},
                                [=](Graph<T>& gr, int self) {
                                    const double g = gr.grad_ref(self)[0] / static_cast<double>(N);
                                    T* gz = gr.grad_buffer(zid).ptr();
                                    for (std::int64_t n = 0; n < N; ++n)
                                        for (std::int64_t k = 0; k < K; ++k) {
                                            const double q = off + (k == lab[n] ? 1.0 - smoothing : 0.0);
                                            gz[n * K + k] += static_cast<T>(g * ((*probs)[n * K + k] - q));
                                        }
                                });
}

#define CMSA_INSTANTIATE_OPS(T)                                                                                 \
    template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, Conv2dOptions);                              \
    template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                            \
    template Var<T> softmax_last(Var<T>);                                                                       \
    template Var<T> gelu(Var<T>);                                                                               \
    template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BasicTensor<T>&, BasicTensor<T>&, BatchNormOptions);   \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                                                 \
    template Var<T> avg_pool2d(Var<T>, int, int);                                                               \
    template Var<T> global_avg_pool(Var<T>);                                                                    \
    template Var<T> add(Var<T>, Var<T>);                                                                        \
    template Var<T> sub(Var<T>, Var<T>);                                                                        \
    template Var<T> mul(Var<T>, Var<T>);                                                                        \
    template Var<T> scale(Var<T>, double);                                                                      \
    template Var<T> sum(Var<T>);                                                                                \
    template Var<T> mean(Var<T>);                                                                               \
    template Var<T> reshape(Var<T>, Shape);                                                                     \
    template Var<T> concat_last(std::span<const Var<T>>);                                                       \
    template Var<T> slice_last(Var<T>, std::int64_t, std::int64_t);                                             \
    template Var<T> cross_entropy_smoothed(Var<T>, std::span<const int>, double);

CMSA_INSTANTIATE_OPS(float)
CMSA_INSTANTIATE_OPS(double)

}  // namespace cmsa
