#include "visprior/autoencoder.hpp"

#include <algorithm>
#include <cmath>

#include "visprior/optim.hpp"

namespace vp {

Autoencoder::Autoencoder(const AEConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    if (cfg.identity()) return;
    Rng rng(hash_combine(seed, 0xae0));
    const int w = cfg.width;
    const int enc_out = cfg.kl_weight > 0.0f ? 2 * cfg.latent_channels : cfg.latent_channels;
    e1 = Conv2d(params, "ae.e1", 3, w, 3, 1, 1, rng, 0.1f);
    e2 = Conv2d(params, "ae.e2", w, w, 3, 2, 1, rng, 0.1f);
    if (cfg.downsample == 4) e4 = Conv2d(params, "ae.e4", w, w, 3, 2, 1, rng, 0.1f);
    e3 = Conv2d(params, "ae.e3", w, enc_out, 3, 1, 1, rng, 0.1f);

    d0 = Conv2d(params, "ae.d0", cfg.latent_channels, w, 3, 1, 1, rng, 0.1f);
    d1 = Conv2d(params, "ae.d1", w, w, 3, 1, 1, rng, 0.1f);
    if (cfg.downsample == 4) d2 = Conv2d(params, "ae.d2", w, w, 3, 1, 1, rng, 0.1f);
    d3 = Conv2d(params, "ae.d3", w, 3, 3, 1, 1, rng, 0.1f);
}

Tensor Autoencoder::encode(const Tensor& images) const {
    VP_CHECK(images.rank() == 4 && images.dim(1) == 3, "ae encode: want [B,3,H,W]");
    VP_CHECK(images.dim(2) % cfg.downsample == 0 && images.dim(3) % cfg.downsample == 0,
             "ae encode: resolution not divisible by downsample factor");
    if (cfg.identity()) return images.clone().detach();

    Tensor h = silu(e1.forward(images));
    h = silu(e2.forward(h));
    if (cfg.downsample == 4) h = silu(e4.forward(h));
    h = e3.forward(h);
    if (cfg.kl_weight > 0.0f) {
        // deterministic read of a stochastic bottleneck: the mean channels
        const int B = h.dim(0), hh = h.dim(2), ww = h.dim(3);
        Tensor mean = Tensor::zeros({B, cfg.latent_channels, hh, ww});
        for (int b = 0; b < B; ++b)
            std::copy(h.ptr() + size_t(b) * 2 * cfg.latent_channels * hh * ww,
                      h.ptr() + (size_t(b) * 2 + 1) * cfg.latent_channels * hh * ww,
                      mean.ptr() + size_t(b) * cfg.latent_channels * hh * ww);
        return mean;
    }
    return h;
}

Tensor Autoencoder::decode(const Tensor& latents) const {
    VP_CHECK(latents.rank() == 4, "ae decode: want [B,c,h,w]");
    if (cfg.identity()) return latents.clone().detach();
    VP_CHECK(latents.dim(1) == cfg.latent_channels, "ae decode: latent channel mismatch");

    Tensor h = silu(d0.forward(latents));
    h = upsample_nearest2x(h);
    h = silu(d1.forward(h));
    if (cfg.downsample == 4) {
        h = upsample_nearest2x(h);
        h = silu(d2.forward(h));
    }
    return tanh_act(d3.forward(h));
}

Tensor Autoencoder::encode_sample(const ImageSample& img) const {
    NoGradGuard ng;
    Tensor batch = Tensor::zeros({1, 3, img.height(), img.width()});
    std::copy(img.pixels.ptr(), img.pixels.ptr() + img.pixels.numel(), batch.ptr());
    Tensor z = encode(batch);
    Tensor out = Tensor::zeros({z.dim(1), z.dim(2), z.dim(3)});
    std::copy(z.ptr(), z.ptr() + z.numel(), out.ptr());
    return out;
}

ImageSample Autoencoder::decode_sample(const Tensor& latent) const {
    NoGradGuard ng;
    VP_CHECK(latent.rank() == 3, "decode_sample: want [c,h,w]");
    Tensor batch = Tensor::zeros({1, latent.dim(0), latent.dim(1), latent.dim(2)});
    std::copy(latent.ptr(), latent.ptr() + latent.numel(), batch.ptr());
    Tensor img = decode(batch);
    ImageSample out;
    out.pixels = Tensor::zeros({3, img.dim(2), img.dim(3)});
    for (size_t i = 0; i < out.pixels.numel(); ++i)
        out.pixels[i] = std::clamp(img[i], -1.0f, 1.0f);
    return out;
}

AETrainResult train_ae(const ImageDataset& dataset, const AEConfig& cfg, int steps, uint64_t seed,
                       int batch, float lr, int warmup) {
    VP_CHECK(!dataset.samples.empty(), "train_ae: empty dataset");
    Autoencoder ae(cfg, seed);
    AETrainResult res;

    if (cfg.identity() || steps == 0) {
        res.weights = ae.params.clone();
        return res;
    }

    AdamWConfig ocfg;
    ocfg.lr = lr;
    ocfg.weight_decay = 0.0f;
    OptimizerState opt(ae.params, ocfg);
    const int n = int(dataset.samples.size());
    const int bs = std::min(batch, n);
    const int side = dataset.samples[0].height();

    for (int step = 0; step < steps; ++step) {
        Rng rng = step_rng(seed, uint64_t(step));
        Tensor x = Tensor::zeros({bs, 3, side, side});
        for (int i = 0; i < bs; ++i) {
            const ImageSample& s = dataset.samples[size_t(rng.uniform_int(n))];
            std::copy(s.pixels.ptr(), s.pixels.ptr() + s.pixels.numel(),
                      x.ptr() + size_t(i) * 3 * side * side);
        }

        Tensor loss;
        Tensor z_for_stats;
        if (cfg.kl_weight > 0.0f) {
            Tensor h = silu(ae.e1.forward(x));
            h = silu(ae.e2.forward(h));
            if (cfg.downsample == 4) h = silu(ae.e4.forward(h));
            h = ae.e3.forward(h);
            const int c = cfg.latent_channels, hh = h.dim(2), ww = h.dim(3);
            Tensor flat = reshape(h, {bs, 2 * c * hh * ww});
            Tensor mean2 = slice_lastdim(flat, 0, c * hh * ww);
            Tensor logvar2 = slice_lastdim(flat, c * hh * ww, c * hh * ww);
            Tensor eps = Tensor::randn({bs, c * hh * ww}, rng);
            Tensor z = add(mean2, mul(exp_act(scale(logvar2, 0.5f)), eps));
            Tensor recon = ae.decode(reshape(z, {bs, c, hh, ww}));
            // KL(N(mu,sigma) || N(0,1)) summed per element, averaged over batch
            Tensor kl = scale(
                sub(add(mul(mean2, mean2), exp_act(logvar2)), add_scalar(logvar2, 1.0f)), 0.5f);
            loss = add(mse(recon, x), scale(mean_all(kl), cfg.kl_weight));
            z_for_stats = mean2.detach();
        } else {
            Tensor z = ae.encode(x);
            Tensor recon = ae.decode(z);
            loss = mse(recon, x);
            z_for_stats = z.detach();
        }

        if (!std::isfinite(loss.item()))
            throw std::runtime_error("train_ae aborted: non-finite loss at step " + std::to_string(step));
        for (float v : *z_for_stats.data) res.max_abs_latent = std::max(res.max_abs_latent, std::fabs(v));

        ae.params.zero_grads();
        backward(loss);
        clip_grad_norm(ae.params, 1.0f);
        opt.hp.lr = warmup_lr(step + 1, lr, warmup);
        adamw_step(ae.params, ae.params.grads(), opt);

        res.loss_curve.emplace_back(step + 1, loss.item());
        res.final_loss = loss.item();
    }
    res.weights = ae.params.clone();
    return res;
}

} // namespace vp
