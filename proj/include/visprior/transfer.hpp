#pragma once

#include <optional>

#include "visprior/autoencoder.hpp"
#include "visprior/checkpoint.hpp"
#include "visprior/data.hpp"
#include "visprior/diffusion.hpp"
#include "visprior/metrics.hpp"

namespace vp {

// --- text-to-image -----------------------------------------------------------

struct TextCondConfig {
    int vocab_size = 12;
    int max_len = 8;    // fixed condition length L per run
    int embed_dim = 32;
    int depth = 2;
    int heads = 4;
    int cond_dim = 32;  // output d_c; a fresh projection is always inserted
};

// Trainable toy text encoder over the closed caption grammar: token + position
// embeddings, pre-LN blocks, final norm, projection to d_c.
struct TextEncoder {
    TextCondConfig cfg;
    ParameterStore params;

    Tensor tok_embed; // [V, embed]
    Tensor pos_embed; // [L, embed]
    struct Block {
        LayerNorm ln1;
        MultiheadAttention attn;
        LayerNorm ln2;
        Mlp mlp;
    };
    std::vector<Block> blocks;
    LayerNorm final_ln;
    Linear out_proj;

    TextEncoder(const TextCondConfig& cfg, uint64_t seed);
    // ids: B*L entries (0-padded captions) -> [B, L, cond_dim]
    Tensor forward(const std::vector<int>& ids, int batch) const;
};

struct T2IModel {
    DiT dit;
    TextEncoder text;
    ParameterStore params; // aliases of both sub-stores, optimizer target

    T2IModel(const BackboneConfig& bb, const TextCondConfig& txt, uint64_t seed);
};

// Backbone weights come from the checkpoint when given (prior path); a null
// checkpoint builds the scratch control with identical architecture.
T2IModel build_t2i(const std::optional<CheckpointBundle>& i2i_checkpoint, const BackboneConfig& bb,
                   const TextCondConfig& txt, uint64_t seed);

// Batch of caption token ids (B*L) against image latents z0 [B,c,h,w].
Tensor t2i_loss(const T2IModel& model, const Tensor& z0, const std::vector<int>& caption_ids,
                const NoiseSchedule& ns, float p_drop, Rng& rng,
                std::vector<char>* drop_mask_out = nullptr);

// --- novel view synthesis ------------------------------------------------------

// Flattened relative pose (9 rotation + 3 translation) through a learned
// two-layer map to one condition token.
struct PoseEmbed {
    Linear fc1, fc2;
    int cond_dim = 0;

    PoseEmbed() = default;
    PoseEmbed(ParameterStore& ps, int cond_dim, uint64_t seed, int hidden = 32);
    Tensor forward(const std::vector<CameraPose>& poses) const; // [B, 1, cond_dim]
};

struct NvsModel {
    DiT dit; // in_channels doubled: noisy target latent || clean source latent
    PoseEmbed pose;
    ParameterStore params;

    NvsModel(const BackboneConfig& widened, uint64_t seed);
};

// Doubles the input channels of the pretrained backbone; the new half of the
// patch embedding is zero-initialized so the first forward equals the
// pretrained model's forward on the original channels exactly.
NvsModel build_nvs(const CheckpointBundle& i2i_checkpoint, const BackboneConfig& pretrained_cfg,
                   uint64_t seed);

// Noise only the target latent; the clean source latent rides along by
// channel concatenation; dropout replaces semantic and pose tokens jointly.
Tensor nvs_loss(const NvsModel& model, const Tensor& target_z0, const Tensor& source_latent,
                const Tensor& source_tokens, const std::vector<CameraPose>& rel_poses,
                const NoiseSchedule& ns, float p_drop, Rng& rng,
                std::vector<char>* drop_mask_out = nullptr);

// One new view from a source image: condition = tau_img(source) + pose token.
ImageSample nvs_sample(const NvsModel& model, const ImageSample& source, const CameraPose& rel,
                       const VisionEncoder& enc, TokenMode mode, int topk, const Autoencoder& ae,
                       const SamplerConfig& sc, const NoiseSchedule& ns);

// --- image-to-video --------------------------------------------------------------

struct I2VConfig {
    int frames = 8;         // n+1; frame 0 is the conditional frame
    int temporal_hidden = 0; // reserved; temporal blocks reuse the model dim
};

// Temporal self-attention across frames at each spatial position, inserted
// after each spatial block; the output projection starts at zero so the first
// forward equals per-frame application of the pretrained image model.
struct TemporalBlock {
    LayerNorm ln;
    MultiheadAttention attn; // zero-init output projection
    Tensor frame_pos;        // [frames, dim]
};

struct I2VModel {
    BackboneConfig cfg;
    I2VConfig icfg;
    DiT dit;
    std::vector<TemporalBlock> temporal;
    ParameterStore params;

    I2VModel(const BackboneConfig& bb, const I2VConfig& icfg, uint64_t seed);

    // latents [B*F, c, h, w] (frames contiguous per clip), per-frame
    // timesteps, condition tokens broadcast per clip
    Tensor forward(const Tensor& latents, const std::vector<int>& t, const Tensor& cond,
                   int clips) const;
};

I2VModel build_i2v(const CheckpointBundle& i2i_checkpoint, const BackboneConfig& pretrained_cfg,
                   const I2VConfig& icfg, uint64_t seed);

size_t temporal_param_count(const BackboneConfig& cfg, const I2VConfig& icfg);

// Frame 0 stays clean at timestep 0; frames 1..n share one drawn t; the loss
// covers frames 1..n only, so no gradient ever flows through the frame-0
// prediction.
Tensor i2v_loss(const I2VModel& model, const Tensor& clip_latents /*[B,F,c,h,w]*/,
                const Tensor& first_frame_tokens /*[B,M,d_c]*/, const NoiseSchedule& ns, Rng& rng);

// The conditional frame is unmasked throughout sampling and decoded as frame
// 0 of the output; in pixel mode it is bit-identical to the input frame.
VideoSample i2v_sample(const ImageSample& first_frame, const I2VModel& model,
                       const VisionEncoder& enc, TokenMode mode, int topk, const Autoencoder& ae,
                       const SamplerConfig& sc, const NoiseSchedule& ns);

// --- shared fine-tune loop ---------------------------------------------------------

struct EvalHook {
    std::string metric;
    int interval = 50;
    bool lower_is_better = true;
    std::function<double(int64_t step)> fn; // sees the live weights
};

struct FinetuneResult {
    MetricCurve curve;
    int64_t steps_done = 0;
    bool aborted = false; // divergence guard tripped
    float initial_loss = 0.0f;
    float final_loss = 0.0f;
    int64_t best_step = -1;
    double best_metric = 0.0;
    ParameterStore best_weights; // snapshot at the best primary metric
};

// Divergence guard: trips after `patience` consecutive steps with loss above
// mult x initial.
struct DivergenceGuard {
    double initial = -1.0;
    double mult = 10.0;
    int patience = 500;
    int streak = 0;
    bool update(double loss) {
        if (initial < 0.0) initial = loss;
        streak = loss > mult * initial ? streak + 1 : 0;
        return streak >= patience;
    }
};

// AdamW loop with linear warmup, global-norm clipping at 1.0, periodic loss
// records and eval hooks. All per-step randomness must come from
// step_rng(seed, step) inside loss_fn, which is what makes a resumed run
// reproduce the uninterrupted one.
FinetuneResult finetune(ParameterStore& params, const std::function<Tensor(int64_t)>& loss_fn,
                        const TrainConfig& tc, const std::vector<EvalHook>& hooks,
                        OptimizerState* opt_in_out = nullptr, int64_t start_step = 0);

} // namespace vp
