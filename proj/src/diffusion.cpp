#include "visprior/diffusion.hpp"

#include <cmath>

namespace vp {

NoiseSchedule make_schedule(int T, float beta_start, float beta_end) {
    VP_CHECK(T >= 1, "make_schedule: T must be positive");
    VP_CHECK(beta_start > 0.0f && beta_start <= beta_end && beta_end < 1.0f,
             "make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule ns;
    ns.T = T;
    ns.beta.resize(size_t(T));
    ns.alpha.resize(size_t(T));
    ns.alpha_bar.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b = T == 1 ? double(beta_start)
                                : double(beta_start) + (double(beta_end) - double(beta_start)) * t / (T - 1);
        ns.beta[size_t(t)] = float(b);
        ns.alpha[size_t(t)] = float(1.0 - b);
        prod *= (1.0 - b);
        ns.alpha_bar[size_t(t)] = float(prod);
    }
    return ns;
}

namespace {
inline void check_t(int t, const NoiseSchedule& ns, const char* who) {
    VP_CHECK(t >= 0 && t < ns.T, std::string(who) + ": timestep " + std::to_string(t) + " outside [0,T)");
}
} // namespace

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& ns) {
    check_t(t, ns, "q_sample");
    VP_CHECK(z0.shape == eps.shape, "q_sample: shape mismatch");
    const float a = std::sqrt(ns.alpha_bar[size_t(t)]);
    const float s = std::sqrt(1.0f - ns.alpha_bar[size_t(t)]);
    Tensor out = Tensor::zeros(z0.shape);
    for (size_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + s * eps[i];
    return out;
}

Tensor q_sample_batch(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                      const NoiseSchedule& ns) {
    VP_CHECK(z0.shape == eps.shape, "q_sample: shape mismatch");
    VP_CHECK(int(t.size()) == z0.dim(0), "q_sample: timestep count mismatch");
    Tensor out = Tensor::zeros(z0.shape);
    const size_t per = z0.numel() / size_t(z0.dim(0));
    for (int b = 0; b < z0.dim(0); ++b) {
        check_t(t[size_t(b)], ns, "q_sample");
        const float a = std::sqrt(ns.alpha_bar[size_t(t[size_t(b)])]);
        const float s = std::sqrt(1.0f - ns.alpha_bar[size_t(t[size_t(b)])]);
        for (size_t i = 0; i < per; ++i)
            out[size_t(b) * per + i] = a * z0[size_t(b) * per + i] + s * eps[size_t(b) * per + i];
    }
    return out;
}

Tensor diffusion_loss_fn(const DenoiseFn& denoise, const Tensor& null_bank, const Tensor& z0,
                         const Tensor& live_cond, const NoiseSchedule& ns, float p_drop, Rng& rng,
                         std::vector<char>* drop_mask_out) {
    VP_CHECK(z0.rank() == 4, "diffusion_loss: want z0 [B,c,h,w]");
    VP_CHECK(live_cond.rank() == 3 && live_cond.dim(0) == z0.dim(0),
             "diffusion_loss: condition batch mismatch");
    VP_CHECK(p_drop >= 0.0f && p_drop <= 1.0f, "diffusion_loss: p_drop outside [0,1]");
    const int B = z0.dim(0);

    std::vector<int> t(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) t[size_t(b)] = rng.uniform_int(ns.T);
    Tensor eps = Tensor::zeros(z0.shape);
    for (size_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normalf();
    std::vector<char> drop(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) drop[size_t(b)] = rng.bernoulli(double(p_drop)) ? 1 : 0;
    if (drop_mask_out) *drop_mask_out = drop;

    Tensor z_t = q_sample_batch(z0, t, eps, ns);
    Tensor cond = compose_condition(live_cond, null_bank, drop);
    Tensor pred = denoise(z_t, t, cond);
    Tensor loss = mse(pred, eps);
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("diffusion_loss: non-finite loss");
    return loss;
}

Tensor diffusion_loss(const DiT& model, const Tensor& z0, const Tensor& live_cond,
                      const NoiseSchedule& ns, float p_drop, Rng& rng,
                      std::vector<char>* drop_mask_out) {
    DenoiseFn fn = [&model](const Tensor& z_t, const std::vector<int>& t, const Tensor& cond) {
        return model.denoise(z_t, t, cond);
    };
    return diffusion_loss_fn(fn, model.null_bank, z0, live_cond, ns, p_drop, rng, drop_mask_out);
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, float w) {
    VP_CHECK(eps_cond.shape == eps_uncond.shape, "cfg_combine: shape mismatch");
    if (w == 1.0f) return eps_cond.clone();
    if (w == 0.0f) return eps_uncond.clone();
    Tensor out = Tensor::zeros(eps_cond.shape);
    for (size_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& ns, Rng& rng) {
    check_t(t, ns, "ddpm_step");
    VP_CHECK(z_t.shape == eps_hat.shape, "ddpm_step: shape mismatch");
    const double beta = ns.beta[size_t(t)];
    const double abar = ns.alpha_bar[size_t(t)];
    const double coef = beta / std::sqrt(1.0 - abar);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(ns.alpha[size_t(t)]);

    Tensor out = Tensor::zeros(z_t.shape);
    for (size_t i = 0; i < out.numel(); ++i)
        out[i] = float(inv_sqrt_alpha * (double(z_t[i]) - coef * double(eps_hat[i])));
    if (t > 0) {
        const double abar_prev = ns.alpha_bar[size_t(t - 1)];
        const double beta_tilde = (1.0 - abar_prev) / (1.0 - abar) * beta;
        const float sigma = float(std::sqrt(beta_tilde));
        for (size_t i = 0; i < out.numel(); ++i) out[i] += sigma * rng.normalf();
    }
    return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, float eta,
                 const NoiseSchedule& ns, Rng& rng) {
    check_t(t, ns, "ddim_step");
    VP_CHECK(t_prev < t, "ddim_step: t_prev must precede t");
    VP_CHECK(eta >= 0.0f && eta <= 1.0f, "ddim_step: eta outside [0,1]");
    VP_CHECK(z_t.shape == eps_hat.shape, "ddim_step: shape mismatch");
    const double abar = ns.alpha_bar[size_t(t)];
    const double sqrt_abar = std::sqrt(abar);
    const double sqrt_om = std::sqrt(1.0 - abar);

    Tensor z0hat = Tensor::zeros(z_t.shape);
    for (size_t i = 0; i < z0hat.numel(); ++i)
        z0hat[i] = float((double(z_t[i]) - sqrt_om * double(eps_hat[i])) / sqrt_abar);
    if (t_prev < 0) return z0hat;

    const double abar_prev = ns.alpha_bar[size_t(t_prev)];
    const double sigma =
        double(eta) * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) * std::sqrt(1.0 - abar / abar_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
    Tensor out = Tensor::zeros(z_t.shape);
    for (size_t i = 0; i < out.numel(); ++i)
        out[i] = float(std::sqrt(abar_prev) * double(z0hat[i]) + dir * double(eps_hat[i]));
    if (sigma > 0.0)
        for (size_t i = 0; i < out.numel(); ++i) out[i] += float(sigma * rng.normal());
    return out;
}

namespace {
Tensor seeded_gaussian(const Shape& shape, uint64_t seed, uint64_t step) {
    Tensor out = Tensor::zeros(shape);
    const int B = shape[0];
    const size_t per = out.numel() / size_t(B);
    // per-element streams split by batch index so batch-parallel evaluation
    // (if ever used) reproduces the serial draws
    for (int b = 0; b < B; ++b) {
        Rng rb = step_rng(seed, step).split(uint64_t(b));
        for (size_t i = 0; i < per; ++i) out[size_t(b) * per + i] = rb.normalf();
    }
    return out;
}
} // namespace

Tensor sample_loop(const EpsFn& eps_fn, const SamplerConfig& sc, const NoiseSchedule& ns,
                   const Shape& latent_shape) {
    VP_CHECK(latent_shape.size() == 4, "sample: want [B,c,h,w] output shape");
    VP_CHECK(sc.steps >= 1 && sc.steps <= ns.T, "sample: steps must lie in [1, T]");
    VP_CHECK(sc.guidance >= 0.0f, "sample: guidance must be nonnegative");
    if (sc.kind == SamplerKind::Ddpm)
        VP_CHECK(sc.steps == ns.T, "sample: ddpm runs the full schedule (steps == T)");
    VP_CHECK(ns.T % sc.steps == 0, "sample: steps must divide T under the stride rule");
    const int stride = ns.T / sc.steps;

    Tensor z = seeded_gaussian(latent_shape, sc.seed, 0xffffffffull);
    const int B = latent_shape[0];

    for (int k = 0; k < sc.steps; ++k) {
        const int t = ns.T - 1 - k * stride;
        const int t_prev = t - stride;
        std::vector<int> tv(size_t(B), t);

        Tensor eps_c = eps_fn(z, tv, true);
        Tensor eps_hat;
        if (sc.guidance == 1.0f) {
            eps_hat = eps_c; // single-pass fast path; identical to the w=1 combine
        } else {
            Tensor eps_u = eps_fn(z, tv, false);
            eps_hat = cfg_combine(eps_c, eps_u, sc.guidance);
        }

        Rng step_noise = step_rng(sc.seed, uint64_t(k));
        if (sc.kind == SamplerKind::Ddpm) {
            z = ddpm_step(z, eps_hat, t, ns, step_noise);
        } else {
            z = ddim_step(z, eps_hat, t, t_prev, sc.eta, ns, step_noise);
        }
        if (!z.all_finite())
            throw std::runtime_error("sample: non-finite latent after step " + std::to_string(k) +
                                     " (t=" + std::to_string(t) + ")");
    }
    return z;
}

Tensor sample(const DiT& model, const Tensor& cond, const SamplerConfig& sc, const NoiseSchedule& ns,
              const Shape& latent_shape) {
    VP_CHECK(cond.rank() == 3, "sample: want condition [B,M,d_c]");
    VP_CHECK(cond.dim(0) == latent_shape[0], "sample: condition batch mismatch");
    NoGradGuard ng;
    Tensor null_cond = model.null_condition_batch(cond.dim(0), cond.dim(1));
    EpsFn fn = [&](const Tensor& z, const std::vector<int>& t, bool conditional) {
        return model.denoise(z, t, conditional ? cond : null_cond);
    };
    return sample_loop(fn, sc, ns, latent_shape);
}

} // namespace vp
