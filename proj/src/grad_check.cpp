#include "cmsa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cmsa/errors.hpp"
#include "cmsa/ops.hpp"

namespace cmsa {

namespace {

template <typename T>
struct Evaluator {
    const GraphBuilder<T>& fn;
    std::vector<BasicTensor<T>>& inputs;
    std::uint64_t seed;
    BasicTensor<T> projection;  // drawn on first use unless preset

    // Returns the scalar objective and the raw output; optionally runs backward.
    double run(bool differentiate, std::vector<BasicTensor<T>>* input_grads, BasicTensor<T>* raw_out) {
        Graph<T> g;
        std::vector<Var<T>> vars;
        vars.reserve(inputs.size());
        for (const auto& t : inputs) vars.push_back(g.input(t));
        Var<T> out = fn(g, std::span<const Var<T>>(vars));
        if (raw_out) *raw_out = out.value();
        Var<T> loss = out;
        double value = static_cast<double>(out.value()[0]);
        if (out.value().numel() != 1) {
            if (projection.empty()) {
                std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
                std::normal_distribution<double> nd(0.0, 1.0);
                projection = BasicTensor<T>(out.shape());
                for (auto& v : projection.data()) v = static_cast<T>(nd(rng));
            }
            loss = sum(mul(out, g.constant(projection)));
            // Reduced in double so finite differences are not quantized by the
            // precision of a large scalar in T.
            value = 0.0;
            const T* o = out.value().ptr();
            const T* r = projection.ptr();
            for (std::int64_t i = 0; i < out.value().numel(); ++i) value += static_cast<double>(o[i]) * r[i];
        }
        if (differentiate) {
            g.backward(loss);
            g.accumulate_parameter_grads();
            if (input_grads) {
                input_grads->clear();
                for (const auto& v : vars) input_grads->push_back(g.grad(v));
            }
        }
        return value;
    }
};

std::vector<std::int64_t> sample_indices(std::int64_t numel, int count, std::mt19937_64& rng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(numel));
    std::iota(idx.begin(), idx.end(), 0);
    if (count >= numel) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename S>
struct Target {
    BasicTensor<S>* value;
    BasicTensor<double> analytic;
    std::string label;
};

template <typename T>
void require_deterministic(Evaluator<T>& ev, double base, const BasicTensor<T>& out) {
    BasicTensor<T> again_out;
    const double again = ev.run(false, nullptr, &again_out);
    if (base != again || !(out == again_out)) {
        throw UsageError("grad_check: function is not deterministic (two evaluations at the same point differ)");
    }
}

// Central differences of `ev` at sampled coordinates of the targets.
template <typename S>
GradCheckReport compare(Evaluator<S>& ev, std::vector<Target<S>>& targets, const GradCheckOptions& options) {
    GradCheckReport report;
    std::mt19937_64 rng(options.seed);
    auto check_at = [&](Target<S>& t, std::int64_t i) {
        BasicTensor<S>& x = *t.value;
        const S original = x[i];
        // Evaluates at original + k * eps; returns the point actually representable in S.
        auto at = [&](double k, double& where) {
            x[i] = static_cast<S>(original + k * options.eps);
            where = static_cast<double>(x[i]);
            return ev.run(false, nullptr, nullptr);
        };
        double xp, xm;
        const double fp = at(1, xp), fm = at(-1, xm);
        x[i] = original;
        const double numeric = (fp - fm) / (xp - xm);
        const double a = t.analytic[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
        ++report.coordinates;
        if (!(rel <= report.max_rel_error)) {
            report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
            std::ostringstream os;
            os << t.label << '[' << i << "] analytic=" << a << " numeric=" << numeric;
            report.worst = os.str();
        }
    };
    if (options.samples_total > 0) {
        std::int64_t total = 0;
        for (const auto& t : targets) total += t.value->numel();
        for (std::int64_t flat : sample_indices(total, options.samples_total, rng)) {
            std::size_t k = 0;
            while (flat >= targets[k].value->numel()) flat -= targets[k++].value->numel();
            check_at(targets[k], flat);
        }
    } else {
        for (auto& t : targets)
            for (std::int64_t i : sample_indices(t.value->numel(), options.samples_per_tensor, rng)) check_at(t, i);
    }
    return report;
}

template <typename T>
void reset_grads(std::span<Parameter<T>* const> params) {
    for (auto* p : params) {
        if (!p->trainable) throw UsageError("grad_check: parameter '" + p->name + "' is not trainable");
        p->grad = BasicTensor<T>::zeros(p->value.shape());
    }
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const GraphBuilder<T>& fn, std::vector<BasicTensor<T>> inputs, const GradCheckOptions& options,
                           std::span<Parameter<T>* const> params) {
    if (!(options.eps > 0)) throw UsageError("grad_check: eps must be positive");
    Evaluator<T> ev{fn, inputs, options.seed, {}};
    reset_grads(params);
    std::vector<BasicTensor<T>> input_grads;
    BasicTensor<T> out;
    const double base = ev.run(true, &input_grads, &out);
    require_deterministic(ev, base, out);

    std::vector<Target<T>> targets;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        targets.push_back({&inputs[k], input_grads[k].template cast<double>(), "input" + std::to_string(k)});
    for (auto* p : params) targets.push_back({&p->value, p->grad.template cast<double>(), p->name});
    return compare(ev, targets, options);
}

GradCheckReport grad_check_shadowed(const GraphBuilder<float>& fn, const GraphBuilder<double>& shadow_fn,
                                    const std::vector<Tensor>& inputs, const GradCheckOptions& options,
                                    std::span<Parameter<float>* const> params,
                                    std::span<Parameter<double>* const> shadow_params) {
    if (!(options.eps > 0)) throw UsageError("grad_check: eps must be positive");
    if (params.size() != shadow_params.size()) throw UsageError("grad_check: shadow parameter list differs in length");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->value.shape() != shadow_params[i]->value.shape())
            throw UsageError("grad_check: shadow of '" + params[i]->name + "' has a different shape");
        shadow_params[i]->value = params[i]->value.cast<double>();
    }
    std::vector<Tensor> inputs32 = inputs;
    Evaluator<float> ev32{fn, inputs32, options.seed, {}};
    reset_grads(params);
    std::vector<Tensor> input_grads;
    Tensor out;
    const double base = ev32.run(true, &input_grads, &out);
    require_deterministic(ev32, base, out);

    std::vector<BasicTensor<double>> inputs64;
    for (const auto& t : inputs) inputs64.push_back(t.cast<double>());
    Evaluator<double> ev64{shadow_fn, inputs64, options.seed, ev32.projection.cast<double>()};
    std::vector<Target<double>> targets;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        targets.push_back({&inputs64[k], input_grads[k].cast<double>(), "input" + std::to_string(k)});
    for (std::size_t i = 0; i < params.size(); ++i)
        targets.push_back({&shadow_params[i]->value, params[i]->grad.cast<double>(), params[i]->name});
    return compare(ev64, targets, options);
}

template GradCheckReport grad_check(const GraphBuilder<float>&, std::vector<BasicTensor<float>>, const GradCheckOptions&,
                                    std::span<Parameter<float>* const>);
template GradCheckReport grad_check(const GraphBuilder<double>&, std::vector<BasicTensor<double>>,
                                    const GradCheckOptions&, std::span<Parameter<double>* const>);

}  // namespace cmsa
