#pragma once

#include "visprior/data.hpp"
#include "visprior/layers.hpp"

namespace vp {

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 4;
    int dim = 48;             // token dim d
    int depth = 3;
    int heads = 4;
    int proj_dim = 32;        // projection-head output K (ssl only)
    int proj_hidden = 96;
    float student_temp = 0.4f;
    float teacher_temp = 0.2f; // must stay below student_temp
    float ema_momentum = 0.99f;
    float center_momentum = 0.9f;

    int patch_count() const { return (image_size / patch_size) * (image_size / patch_size); }
    void validate() const {
        VP_CHECK(image_size % patch_size == 0, "encoder config: image side not divisible by patch size");
        VP_CHECK(teacher_temp < student_temp, "encoder config: teacher temp must be below student temp");
        VP_CHECK(ema_momentum > 0.0f && ema_momentum < 1.0f, "encoder config: ema momentum out of (0,1)");
    }
};

// Output of the frozen encoder for one image: the global token, the patch
// tokens, and the last block's CLS->patch attention (averaged over heads,
// renormalized over patches so the P scores sum to 1).
struct TokenBundle {
    Tensor cls;                  // [d]
    Tensor patches;              // [P, d]
    std::vector<float> cls_attn; // P scores
};

enum class TokenMode { Cls, Local, All, TopK };
TokenMode token_mode_from_string(const std::string& s);
std::string to_string(TokenMode m);

struct ConditionTokens {
    Tensor tokens; // [M', d]
    TokenMode mode = TokenMode::All;
    int count() const { return tokens.dim(0); }
};

// Small pre-LN ViT. Weights live in `params`; callers treat them as frozen
// once pretraining is done.
struct VisionEncoder {
    EncoderConfig cfg;
    ParameterStore params;

    Linear patch_embed;
    Tensor cls_token; // [1, d]
    Tensor pos_embed; // [P+1, d]
    struct Block {
        LayerNorm ln1;
        MultiheadAttention attn;
        LayerNorm ln2;
        Mlp mlp;
    };
    std::vector<Block> blocks;
    LayerNorm final_ln;

    VisionEncoder(const EncoderConfig& cfg, uint64_t seed);

    // images [B,3,H,W] -> layer-normalized tokens [B,P+1,d]; when cls_attn is
    // given it receives B*P renormalized CLS->patch scores.
    Tensor forward_tokens(const Tensor& images, std::vector<float>* cls_attn = nullptr) const;

    TokenBundle encode(const ImageSample& image) const;
};

// Token-mode law: cls -> 1, local -> P, all -> P+1, topk -> k
// (CLS plus the k-1 patches with the largest CLS attention, ties broken by
// lower patch index).
ConditionTokens select_condition_tokens(const TokenBundle& bundle, TokenMode mode, int k = 0);

// Mean cosine similarity between CLS tokens of paired image sets (a[i] vs
// b[i]); sizes must match.
double feature_alignment_score(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b,
                               const VisionEncoder& enc);
double feature_alignment_from_features(const Tensor& fa, const Tensor& fb); // [n,d] each

// CLS features of a set, [n, d]; shared by alignment and Frechet evaluation.
Tensor encode_cls_batch(const VisionEncoder& enc, const std::vector<ImageSample>& images,
                        int batch = 64);

// Seeded augmentation pipeline for self-distillation: random resized crop
// (area scale 0.5..1), horizontal flip, color jitter.
ImageSample augment_view(const ImageSample& img, Rng& rng);

struct SslResult {
    ParameterStore weights; // teacher encoder weights; projection head discarded
    ParameterStore student_full;
    ParameterStore teacher_full;
    std::vector<std::pair<int64_t, float>> loss_curve;
    double min_teacher_entropy = 0.0;
    float final_loss = 0.0f;
};

// DINO-style self-distillation: student/teacher encoders with projection
// heads, two augmented views per image, cross-entropy of the student
// log-softmax (tau_s) against the centered teacher softmax (tau_t), teacher
// tracked by EMA, center by running mean. Aborts on a non-finite loss.
SslResult ssl_pretrain(const ImageDataset& dataset, const EncoderConfig& cfg, int steps, uint64_t seed,
                       int batch = 32, float lr = 1.6e-4f, int warmup = 100);

} // namespace vp
