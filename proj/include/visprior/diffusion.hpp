#pragma once

#include <functional>

#include "visprior/backbone.hpp"

namespace vp {

// beta/alpha/alpha_bar tables driving forward and reverse diffusion.
struct NoiseSchedule {
    int T = 0;
    std::vector<float> beta;
    std::vector<float> alpha;     // 1 - beta
    std::vector<float> alpha_bar; // running product, strictly decreasing
};

// Linear beta ramp (the only kind; nothing else is specified anywhere).
NoiseSchedule make_schedule(int T, float beta_start = 1e-4f, float beta_end = 0.02f);

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& ns);
Tensor q_sample_batch(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                      const NoiseSchedule& ns);

enum class SamplerKind { Ddpm, Ddim };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::Ddim;
    int steps = 50;        // S; DDIM: S | T, DDPM: S == T
    float guidance = 1.0f; // w
    float eta = 0.0f;      // DDIM eta; 0 = deterministic
    uint64_t seed = 0;
};

struct TrainConfig {
    int steps = 1000;
    int batch = 128;
    float p_drop = 0.1f;
    float lr = 1.6e-4f;
    float weight_decay = 0.03f;
    int warmup = 1000;
    int eval_interval = 50;
    uint64_t seed = 0;

    void validate() const { VP_CHECK(p_drop >= 0.0f && p_drop <= 1.0f, "train config: p_drop outside [0,1]"); }
};

using DenoiseFn = std::function<Tensor(const Tensor& z_t, const std::vector<int>& t, const Tensor& cond)>;

// Epsilon-prediction training objective over a prepared batch. Per sample:
// uniform t, fresh Gaussian eps, and with probability p_drop the live
// condition tokens are swapped for the learned null bank before the shared
// projection. Returns the scalar loss (graph) and reports the drop mask.
Tensor diffusion_loss_fn(const DenoiseFn& denoise, const Tensor& null_bank, const Tensor& z0,
                         const Tensor& live_cond, const NoiseSchedule& ns, float p_drop, Rng& rng,
                         std::vector<char>* drop_mask_out = nullptr);

Tensor diffusion_loss(const DiT& model, const Tensor& z0, const Tensor& live_cond,
                      const NoiseSchedule& ns, float p_drop, Rng& rng,
                      std::vector<char>* drop_mask_out = nullptr);

// eps_hat = eps_uncond + w * (eps_cond - eps_uncond); w=1 and w=0 return the
// corresponding input bitwise.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, float w);

// Posterior-mean step with sigma^2 = beta_tilde; no noise at t=0.
Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& ns, Rng& rng);

// Predicts z0hat, then re-noises deterministically (eta=0) or with eta-scaled
// variance; t_prev < 0 returns z0hat.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, float eta,
                 const NoiseSchedule& ns, Rng& rng);

// Denoiser surface the sampler drives: conditional=false runs the null pass.
using EpsFn = std::function<Tensor(const Tensor& z, const std::vector<int>& t, bool conditional)>;

// Reverse process from seeded Gaussian z_T. Stride rule: the DDIM trajectory
// visits t = T-1, T-1-s, ... with s = T/S, finishing with a t_prev = -1 step
// that emits z0hat; DDPM requires S == T. Aborts with the step index if any
// intermediate goes non-finite.
Tensor sample_loop(const EpsFn& eps_fn, const SamplerConfig& sc, const NoiseSchedule& ns,
                   const Shape& latent_shape);

// DiT convenience wrapper: live condition [B,M,d_c]; the unconditional pass
// uses the model's null bank. w=1 skips the unconditional pass entirely.
Tensor sample(const DiT& model, const Tensor& cond, const SamplerConfig& sc, const NoiseSchedule& ns,
              const Shape& latent_shape);

} // namespace vp
