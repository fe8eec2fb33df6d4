#pragma once

#include "visprior/data.hpp"
#include "visprior/layers.hpp"

namespace vp {

struct AEConfig {
    int downsample = 1;      // f in {1, 2, 4}; 1 = exact identity in pixel space
    int latent_channels = 3; // c (forced to 3 in identity mode)
    int width = 16;          // conv width
    float kl_weight = 0.0f;  // 0 disables the stochastic bottleneck

    bool identity() const { return downsample == 1; }
    void validate() const {
        VP_CHECK(downsample == 1 || downsample == 2 || downsample == 4, "ae config: downsample must be 1, 2 or 4");
        VP_CHECK(!identity() || latent_channels == 3, "ae config: identity mode fixes latent channels at 3");
    }
};

// Compression stage E/D in front of the diffusion model. Frozen once trained;
// identity mode routes pixels straight through so the whole stack runs in
// pixel space with no behavioral change beyond shapes.
struct Autoencoder {
    AEConfig cfg;
    ParameterStore params;

    Conv2d e1, e2, e3, e4; // e4 only for f=4
    Conv2d d0, d1, d2, d3;

    Autoencoder(const AEConfig& cfg, uint64_t seed);

    // [B,3,H,W] -> [B,c,H/f,W/f]; mean of the bottleneck when stochastic
    Tensor encode(const Tensor& images) const;
    // [B,c,h,w] -> [B,3,h*f,w*f], clamped to [-1,1] (tanh output head)
    Tensor decode(const Tensor& latents) const;

    Tensor encode_sample(const ImageSample& img) const; // [c,h,w], no grad
    ImageSample decode_sample(const Tensor& latent) const;

    int latent_side(int image_side) const { return image_side / cfg.downsample; }
};

struct AETrainResult {
    ParameterStore weights;
    std::vector<std::pair<int64_t, float>> loss_curve;
    float max_abs_latent = 0.0f; // empirical bound recorded at train time
    float final_loss = 0.0f;
};

AETrainResult train_ae(const ImageDataset& dataset, const AEConfig& cfg, int steps, uint64_t seed,
                       int batch = 16, float lr = 1e-3f, int warmup = 50);

} // namespace vp
