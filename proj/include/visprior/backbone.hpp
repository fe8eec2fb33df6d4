#pragma once

#include "visprior/layers.hpp"

namespace vp {

enum class CondMode { CrossAttention, AdaLnZeroCond };
CondMode cond_mode_from_string(const std::string& s);
std::string to_string(CondMode m);

struct BackboneConfig {
    int latent_side = 32;
    int latent_channels = 3;  // output channels (epsilon prediction)
    int in_channels = 3;      // input channels; doubled by the NVS transfer
    int patch = 8;
    int dim = 48;
    int depth = 2;
    int heads = 4;
    int mlp_ratio = 4;
    int cond_dim = 32;        // d_c of incoming condition tokens
    int max_cond_tokens = 72;
    CondMode mode = CondMode::CrossAttention;

    int token_count() const { return (latent_side / patch) * (latent_side / patch); }
    void validate() const {
        VP_CHECK(latent_side % patch == 0, "backbone config: latent side not divisible by patch");
        VP_CHECK(dim % heads == 0, "backbone config: dim not divisible by heads");
        VP_CHECK(max_cond_tokens >= 1, "backbone config: need at least one condition slot");
    }
};

// Sinusoidal timestep features; identical timesteps embed identically and the
// map is injective over the schedules used here.
struct TimestepEmbedding {
    int dim = 0;
    std::vector<float> freqs; // dim/2 table, base 10000

    TimestepEmbedding() = default;
    explicit TimestepEmbedding(int d);
    Tensor embed(const std::vector<int>& t) const; // [B, dim], constant w.r.t. autodiff
};

// DiT block: self-attention -> (cross-attention) -> MLP, with shift/scale/gate
// modulation regressed from the conditioning vector. The modulation output
// layer and the cross/out projections are zero-initialized, so a fresh block
// is an exact identity.
struct DiTBlock {
    MultiheadAttention self_attn;
    MultiheadAttention cross_attn; // cross_attention mode only
    Mlp mlp;
    Linear mod; // dim -> 6*dim, zero-init

    // x [B,N,D], cvec [B,D], cond tokens projected to model dim [B,M,D]
    Tensor forward(const Tensor& x, const Tensor& cvec, const Tensor& cond_proj, CondMode mode) const;
};

// The denoiser epsilon_theta over latent patch tokens.
struct DiT {
    BackboneConfig cfg;
    ParameterStore params;

    Linear patch_embed;
    Tensor pos_embed;   // [N, dim], learned; condition tokens get none
    TimestepEmbedding sinusoid;
    Linear t_fc1, t_fc2;
    Linear cond_proj;   // d_c -> dim
    Tensor null_bank;   // [max_cond_tokens, d_c], learned, trains via dropout
    std::vector<DiTBlock> blocks;
    Linear final_mod;   // dim -> 2*dim, zero-init
    Linear final_linear; // dim -> p*p*latent_channels, zero-init

    DiT(const BackboneConfig& cfg, uint64_t seed);

    // z [B,in_channels,h,w], per-sample timesteps, cond [B,M,cond_dim]
    // -> epsilon prediction [B,latent_channels,h,w]
    Tensor denoise(const Tensor& z, const std::vector<int>& t, const Tensor& cond) const;

    // decomposed pieces so transfers can interleave their own blocks
    Tensor tokens_in(const Tensor& z) const;
    Tensor time_vector(const std::vector<int>& t) const;          // [B, dim]
    Tensor condition_vector(const Tensor& tvec, const Tensor& cond_proj) const; // per-mode cvec
    Tensor project_condition(const Tensor& cond) const;           // [B,M,dim]
    Tensor tokens_out(const Tensor& x, const Tensor& tvec, int h, int w) const;

    // learned null bank truncated to length; same tokens on every call
    Tensor null_condition(int len) const;

    // broadcast of null_condition over a batch, for unconditional passes
    Tensor null_condition_batch(int batch, int len) const;
};

// Parameter count as a pure function of the configuration.
size_t backbone_param_count(const BackboneConfig& cfg);

} // namespace vp
