#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmsa/config.hpp"
#include "cmsa/graph.hpp"

namespace cmsa {

struct AdamWConfig {
    double weight_decay = 5e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moments per trainable parameter, in store order.
struct OptimState {
    std::vector<std::string> names;
    std::vector<Tensor> m, v;
    std::int64_t step = 0;
};

OptimState init_optim_state(const ParamStore<float>& params);

/// One AdamW update from the accumulated `grad` of every trainable
/// parameter: p <- p * (1 - lr * wd), then the bias-corrected Adam step.
/// Throws NumericError naming the first parameter with a non-finite gradient,
/// before anything is modified; UsageError when the state does not match.
void adamw_step(ParamStore<float>& params, OptimState& state, double lr, const AdamWConfig& hp);

/// Learning-rate schedule in optimizer steps.
struct Schedule {
    ScheduleKind kind = ScheduleKind::cosine;
    double lr_max = 2.5e-3;
    double lr_min = 1e-5;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
    std::int64_t steps_per_epoch = 1;
    /// Step kind: epochs at which the rate is multiplied by `decay`.
    std::vector<int> milestones;
    double decay = 0.1;
};

Schedule make_schedule(const ScheduleConfig& config, int epochs, std::int64_t steps_per_epoch);

/// Linear ramp to lr_max reached at the last warmup step, then cosine from
/// lr_max down to lr_min at the final step (or step decay at milestones).
/// Throws UsageError unless 0 <= step < total_steps.
double lr_at(std::int64_t step, const Schedule& schedule);

}  // namespace cmsa
