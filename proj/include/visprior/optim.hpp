#pragma once

#include <functional>

#include "visprior/tensor.hpp"

namespace vp {

struct AdamWConfig {
    float lr = 1.6e-4f;       // constant rate after warm-up
    float weight_decay = 0.03f;
    float beta1 = 0.9f;       // betas/eps are assumed defaults, not quoted values
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Per-parameter first/second moments plus the shared step counter.
struct OptimizerState {
    AdamWConfig hp;
    ParameterStore m;
    ParameterStore v;
    int64_t step = 0;

    OptimizerState() = default;
    explicit OptimizerState(const ParameterStore& params, AdamWConfig cfg = {});
};

// Decoupled AdamW: params scaled by (1 - lr*wd) before the moment update,
// bias-corrected moments, step counter incremented once per call.
// grads must align with params by name and shape.
void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state);

// Linear ramp 0 -> base_lr over warmup_steps, constant afterwards.
float warmup_lr(int64_t step, float base_lr, int64_t warmup_steps);

// Scales all grads so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
float clip_grad_norm(ParameterStore& params, float max_norm);

struct EMAState {
    ParameterStore shadow;
    float momentum = 0.999f;

    EMAState() = default;
    EMAState(const ParameterStore& source, float m) : shadow(source.clone()), momentum(m) {}
};

// shadow <- m*shadow + (1-m)*student, elementwise, aligned by name.
void ema_update(EMAState& teacher, const ParameterStore& student);

// Central-difference check of the analytic gradient of a scalar function
// over a ParameterStore. Samples up to max_entries_per_param entries of each
// tensor and returns
//   max |analytic - fd| / (|fd| + 1e-8).
// The function must be deterministic across calls (fix all rng inside).
// Throws if the loss is non-finite.
float grad_check(const std::function<Tensor(ParameterStore&)>& loss_fn, ParameterStore& params,
                 float eps_fd = 1e-2f, int max_entries_per_param = 6, uint64_t seed = 0);

} // namespace vp
