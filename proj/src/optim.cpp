#include "visprior/optim.hpp"

#include <algorithm>
#include <cmath>

namespace vp {

OptimizerState::OptimizerState(const ParameterStore& params, AdamWConfig cfg) : hp(cfg) {
    for (const auto& name : params.names()) {
        m.add(name, Tensor::zeros(params.get(name).shape));
        v.add(name, Tensor::zeros(params.get(name).shape));
    }
}

void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state) {
    state.step += 1;
    const AdamWConfig& hp = state.hp;
    const double bc1 = 1.0 - std::pow(double(hp.beta1), double(state.step));
    const double bc2 = 1.0 - std::pow(double(hp.beta2), double(state.step));
    const float decay = 1.0f - hp.lr * hp.weight_decay;

    for (const auto& name : params.names()) {
        Tensor& p = params.get(name);
        const Tensor& g = grads.get(name);
        VP_CHECK(g.shape == p.shape, "adamw_step: grad/param shape mismatch at '" + name + "'");
        Tensor& m = state.m.get(name);
        Tensor& v = state.v.get(name);
        VP_CHECK(m.shape == p.shape, "adamw_step: state shape mismatch at '" + name + "'");

        const size_t n = p.numel();
        for (size_t i = 0; i < n; ++i) {
            float pv = (*p.data)[i] * decay;
            const float gv = (*g.data)[i];
            const float mv = (*m.data)[i] = hp.beta1 * (*m.data)[i] + (1.0f - hp.beta1) * gv;
            const float vv = (*v.data)[i] = hp.beta2 * (*v.data)[i] + (1.0f - hp.beta2) * gv * gv;
            const double mhat = double(mv) / bc1;
            const double vhat = double(vv) / bc2;
            (*p.data)[i] = pv - float(double(hp.lr) * mhat / (std::sqrt(vhat) + double(hp.eps)));
        }
    }
}

float warmup_lr(int64_t step, float base_lr, int64_t warmup_steps) {
    VP_CHECK(warmup_steps >= 1, "warmup_lr: warmup_steps must be >= 1");
    if (step >= warmup_steps) return base_lr;
    if (step <= 0) return 0.0f;
    return base_lr * float(double(step) / double(warmup_steps));
}

float clip_grad_norm(ParameterStore& params, float max_norm) {
    double sq = 0.0;
    for (const auto& name : params.names()) {
        const Tensor& p = params.get(name);
        if (!p.grad) continue;
        for (float g : *p.grad) sq += double(g) * double(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > double(max_norm) && norm > 0.0) {
        const float s = float(double(max_norm) / norm);
        for (const auto& name : params.names()) {
            Tensor& p = params.get(name);
            if (!p.grad) continue;
            for (auto& g : *p.grad) g *= s;
        }
    }
    return float(norm);
}

void ema_update(EMAState& teacher, const ParameterStore& student) {
    const float m = teacher.momentum;
    for (const auto& name : teacher.shadow.names()) {
        Tensor& sh = teacher.shadow.get(name);
        const Tensor& st = student.get(name);
        VP_CHECK(st.shape == sh.shape, "ema_update: shape mismatch at '" + name + "'");
        const size_t n = sh.numel();
        for (size_t i = 0; i < n; ++i) (*sh.data)[i] = m * (*sh.data)[i] + (1.0f - m) * (*st.data)[i];
    }
}

float grad_check(const std::function<Tensor(ParameterStore&)>& loss_fn, ParameterStore& params,
                 float eps_fd, int max_entries_per_param, uint64_t seed) {
    params.zero_grads();
    Tensor loss = loss_fn(params);
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("grad_check aborted: non-finite loss " + std::to_string(loss.item()));
    backward(loss);

    // snapshot analytic grads; fd evaluations below run without autodiff
    ParameterStore analytic;
    for (const auto& name : params.names()) analytic.add(name, params.grads().get(name).clone());

    float max_rel = 0.0f;
    NoGradGuard ng;
    (void)seed;
    for (const auto& name : params.names()) {
        Tensor& p = params.get(name);
        const size_t n = p.numel();
        const int samples = int(std::min<size_t>(size_t(max_entries_per_param), n));
        // probe the largest-|analytic| entries: their finite differences sit
        // well above fp32 loss quantization, so the comparison is meaningful
        const std::vector<float>& an_vals = *analytic.get(name).data;
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return std::fabs(an_vals[a]) > std::fabs(an_vals[b]);
        });
        for (int s = 0; s < samples; ++s) {
            const size_t idx = order[size_t(s)];
            const float orig = (*p.data)[idx];
            (*p.data)[idx] = orig + eps_fd;
            const double lp = double(loss_fn(params).item());
            (*p.data)[idx] = orig - eps_fd;
            const double lm = double(loss_fn(params).item());
            (*p.data)[idx] = orig;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw std::runtime_error("grad_check aborted: non-finite perturbed loss at '" + name + "'");
            const double fd = (lp - lm) / (2.0 * double(eps_fd));
            const double an = double((*analytic.get(name).data)[idx]);
            const double rel = std::fabs(an - fd) / (std::fabs(fd) + 1e-8);
            if (float(rel) > max_rel) max_rel = float(rel);
        }
    }
    return max_rel;
}

} // namespace vp
