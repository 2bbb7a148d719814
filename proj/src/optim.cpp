#include "cmsa/optim.hpp"

#include <cmath>

#include "cmsa/errors.hpp"

namespace cmsa {

OptimState init_optim_state(const ParamStore<float>& params) {
    OptimState s;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (!p.trainable) continue;
        s.names.push_back(p.name);
        s.m.push_back(Tensor::zeros(p.value.shape()));
        s.v.push_back(Tensor::zeros(p.value.shape()));
    }
    return s;
}

void adamw_step(ParamStore<float>& params, OptimState& state, double lr, const AdamWConfig& hp) {
    std::vector<Parameter<float>*> trainable;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].trainable) trainable.push_back(&params[i]);
    if (trainable.size() != state.names.size())
        throw UsageError("adamw_step: optimizer state has " + std::to_string(state.names.size()) + " entries for " +
                         std::to_string(trainable.size()) + " trainable parameters");
    for (std::size_t k = 0; k < trainable.size(); ++k) {
        const auto& p = *trainable[k];
        if (p.name != state.names[k] || p.value.shape() != state.m[k].shape())
            throw UsageError("adamw_step: optimizer state does not match parameter '" + p.name + "'");
        if (!p.grad.empty() && p.grad.shape() != p.value.shape())
            throw UsageError("adamw_step: gradient of '" + p.name + "' has shape " + shape_str(p.grad.shape()));
        if (!p.grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }

    const std::int64_t t = ++state.step;
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
    const double shrink = 1.0 - lr * hp.weight_decay;
    for (std::size_t k = 0; k < trainable.size(); ++k) {
        auto& p = *trainable[k];
        float* w = p.value.ptr();
        float* m = state.m[k].ptr();
        float* v = state.v[k].ptr();
        const float* g = p.grad.empty() ? nullptr : p.grad.ptr();
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double gi = g ? g[i] : 0.0;
            const double mi = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            const double vi = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double wi = w[i] * shrink;
            w[i] = static_cast<float>(wi - lr * (mi / c1) / (std::sqrt(vi / c2) + hp.eps));
        }
    }
}

Schedule make_schedule(const ScheduleConfig& config, int epochs, std::int64_t steps_per_epoch) {
    if (epochs <= 0 || steps_per_epoch <= 0) throw UsageError("make_schedule: epochs and steps per epoch must be positive");
    if (config.warmup_epochs < 0 || config.warmup_epochs >= epochs)
        throw ConfigError("train.schedule.warmup_epochs: must be in [0, epochs)");
    Schedule s;
    s.kind = config.kind;
    s.lr_max = config.lr_max;
    s.lr_min = config.lr_min;
    s.steps_per_epoch = steps_per_epoch;
    s.warmup_steps = config.warmup_epochs * steps_per_epoch;
    s.total_steps = epochs * steps_per_epoch;
    s.milestones = config.milestones;
    s.decay = config.decay;
    return s;
}

double lr_at(std::int64_t step, const Schedule& s) {
    if (step < 0 || step >= s.total_steps)
        throw UsageError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + ")");
    if (step < s.warmup_steps) return s.lr_max * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
    if (s.kind == ScheduleKind::step) {
        const std::int64_t epoch = step / s.steps_per_epoch;
        double lr = s.lr_max;
        for (int m : s.milestones)
            if (epoch >= m) lr *= s.decay;
        return std::max(lr, s.lr_min);
    }
    const std::int64_t span = s.total_steps - 1 - s.warmup_steps;
    const double progress = span > 0 ? static_cast<double>(step - s.warmup_steps) / static_cast<double>(span) : 1.0;
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(M_PI * progress));
}

}  // namespace cmsa
