#include "visprior/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "visprior/optim.hpp"

namespace vp {

TokenMode token_mode_from_string(const std::string& s) {
    if (s == "cls") return TokenMode::Cls;
    if (s == "local") return TokenMode::Local;
    if (s == "all") return TokenMode::All;
    if (s == "topk") return TokenMode::TopK;
    throw std::runtime_error("unknown token mode: " + s);
}

std::string to_string(TokenMode m) {
    switch (m) {
        case TokenMode::Cls: return "cls";
        case TokenMode::Local: return "local";
        case TokenMode::All: return "all";
        default: return "topk";
    }
}

VisionEncoder::VisionEncoder(const EncoderConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(hash_combine(seed, 0xe6c));
    const int P = cfg.patch_count();
    const int td = cfg.patch_size * cfg.patch_size * 3;
    patch_embed = Linear(params, "enc.patch_embed", td, cfg.dim, rng);
    cls_token = params.add("enc.cls", Tensor::trunc_normal({1, cfg.dim}, rng, 0.02f, true));
    pos_embed = params.add("enc.pos", Tensor::trunc_normal({P + 1, cfg.dim}, rng, 0.02f, true));
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "enc.block" + std::to_string(i);
        Block b;
        b.ln1 = LayerNorm(params, p + ".ln1", cfg.dim);
        b.attn = MultiheadAttention(params, p + ".attn", cfg.dim, cfg.heads, rng);
        b.ln2 = LayerNorm(params, p + ".ln2", cfg.dim);
        b.mlp = Mlp(params, p + ".mlp", cfg.dim, cfg.dim * 4, cfg.dim, rng);
        blocks.push_back(std::move(b));
    }
    final_ln = LayerNorm(params, "enc.final_ln", cfg.dim);
}

Tensor VisionEncoder::forward_tokens(const Tensor& images, std::vector<float>* cls_attn) const {
    VP_CHECK(images.rank() == 4 && images.dim(1) == 3, "encoder: want images [B,3,H,W]");
    VP_CHECK(images.dim(2) == cfg.image_size && images.dim(3) == cfg.image_size,
             "encoder: image side " + std::to_string(images.dim(2)) + " does not match configured " +
                 std::to_string(cfg.image_size));
    const int B = images.dim(0);
    const int P = cfg.patch_count();

    Tensor x = patch_embed.forward(patchify(images, cfg.patch_size)); // [B,P,d]
    Tensor cls = add_rows(Tensor::zeros({B, 1, cfg.dim}), cls_token); // broadcast cls token
    x = concat_tokens(cls, x);                                        // [B,P+1,d]
    x = add_rows(x, pos_embed);

    std::shared_ptr<std::vector<float>> attn_w;
    for (size_t i = 0; i < blocks.size(); ++i) {
        const Block& b = blocks[i];
        const bool last = i + 1 == blocks.size();
        Tensor h = b.ln1.forward(x);
        Tensor a = b.attn.forward(h, h, last && cls_attn ? &attn_w : nullptr);
        x = add(x, a);
        x = add(x, b.mlp.forward(b.ln2.forward(x)));
    }

    if (cls_attn) {
        // CLS query row of the last block, averaged over heads, CLS->CLS mass
        // dropped and the P patch scores renormalized to sum 1
        cls_attn->assign(size_t(B) * P, 0.0f);
        const int n = P + 1;
        for (int bb = 0; bb < B; ++bb) {
            for (int h = 0; h < cfg.heads; ++h) {
                const float* row = attn_w->data() + ((size_t(bb) * cfg.heads + h) * n + 0) * n;
                for (int j = 0; j < P; ++j) (*cls_attn)[size_t(bb) * P + j] += row[j + 1];
            }
            double sum = 0.0;
            for (int j = 0; j < P; ++j) sum += (*cls_attn)[size_t(bb) * P + j];
            VP_CHECK(sum > 0.0, "encoder: degenerate CLS attention");
            for (int j = 0; j < P; ++j) (*cls_attn)[size_t(bb) * P + j] = float((*cls_attn)[size_t(bb) * P + j] / sum);
        }
    }
    return final_ln.forward(x);
}

TokenBundle VisionEncoder::encode(const ImageSample& image) const {
    NoGradGuard ng;
    Tensor batch = Tensor::zeros({1, 3, image.height(), image.width()});
    std::copy(image.pixels.ptr(), image.pixels.ptr() + image.pixels.numel(), batch.ptr());
    std::vector<float> attn;
    Tensor tokens = forward_tokens(batch, &attn);

    const int P = cfg.patch_count();
    TokenBundle out;
    out.cls = Tensor::zeros({cfg.dim});
    std::copy(tokens.ptr(), tokens.ptr() + cfg.dim, out.cls.ptr());
    out.patches = Tensor::zeros({P, cfg.dim});
    std::copy(tokens.ptr() + cfg.dim, tokens.ptr() + size_t(P + 1) * cfg.dim, out.patches.ptr());
    out.cls_attn = std::move(attn);
    return out;
}

ConditionTokens select_condition_tokens(const TokenBundle& bundle, TokenMode mode, int k) {
    const int P = bundle.patches.dim(0);
    const int d = bundle.patches.dim(1);
    ConditionTokens out;
    out.mode = mode;
    switch (mode) {
        case TokenMode::Cls: {
            out.tokens = Tensor::zeros({1, d});
            std::copy(bundle.cls.ptr(), bundle.cls.ptr() + d, out.tokens.ptr());
            break;
        }
        case TokenMode::Local: {
            out.tokens = bundle.patches.clone();
            break;
        }
        case TokenMode::All: {
            out.tokens = Tensor::zeros({P + 1, d});
            std::copy(bundle.cls.ptr(), bundle.cls.ptr() + d, out.tokens.ptr());
            std::copy(bundle.patches.ptr(), bundle.patches.ptr() + size_t(P) * d, out.tokens.ptr() + d);
            break;
        }
        case TokenMode::TopK: {
            VP_CHECK(k >= 1 && k <= P + 1, "select_condition_tokens: k must be in [1, P+1], got " +
                                               std::to_string(k));
            VP_CHECK(int(bundle.cls_attn.size()) == P, "select_condition_tokens: missing CLS attention");
            std::vector<int> idx(static_cast<size_t>(P));
            std::iota(idx.begin(), idx.end(), 0);
            std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
                if (bundle.cls_attn[size_t(a)] != bundle.cls_attn[size_t(b)])
                    return bundle.cls_attn[size_t(a)] > bundle.cls_attn[size_t(b)];
                return a < b; // ties by lower patch index
            });
            out.tokens = Tensor::zeros({k, d});
            std::copy(bundle.cls.ptr(), bundle.cls.ptr() + d, out.tokens.ptr());
            for (int i = 0; i + 1 < k; ++i)
                std::copy(bundle.patches.ptr() + size_t(idx[size_t(i)]) * d,
                          bundle.patches.ptr() + size_t(idx[size_t(i)] + 1) * d, out.tokens.ptr() + size_t(i + 1) * d);
            break;
        }
    }
    return out;
}

Tensor encode_cls_batch(const VisionEncoder& enc, const std::vector<ImageSample>& images, int batch) {
    VP_CHECK(!images.empty(), "encode_cls_batch: empty set");
    NoGradGuard ng;
    const int n = int(images.size());
    const int side = images[0].height();
    Tensor out = Tensor::zeros({n, enc.cfg.dim});
    for (int start = 0; start < n; start += batch) {
        const int bs = std::min(batch, n - start);
        Tensor imgs = Tensor::zeros({bs, 3, side, side});
        for (int i = 0; i < bs; ++i)
            std::copy(images[size_t(start + i)].pixels.ptr(),
                      images[size_t(start + i)].pixels.ptr() + images[size_t(start + i)].pixels.numel(),
                      imgs.ptr() + size_t(i) * 3 * side * side);
        Tensor tokens = enc.forward_tokens(imgs);
        const int nt = tokens.dim(1);
        for (int i = 0; i < bs; ++i)
            std::copy(tokens.ptr() + size_t(i) * nt * enc.cfg.dim,
                      tokens.ptr() + size_t(i) * nt * enc.cfg.dim + enc.cfg.dim,
                      out.ptr() + size_t(start + i) * enc.cfg.dim);
    }
    return out;
}

double feature_alignment_from_features(const Tensor& fa, const Tensor& fb) {
    VP_CHECK(fa.rank() == 2 && fb.shape == fa.shape, "feature_alignment: want matching [n,d]");
    const int n = fa.dim(0), d = fa.dim(1);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = fa[size_t(i) * d + size_t(j)], y = fb[size_t(i) * d + size_t(j)];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        acc += dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    }
    return acc / double(n);
}

double feature_alignment_score(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b,
                               const VisionEncoder& enc) {
    VP_CHECK(!a.empty() && !b.empty(), "feature_alignment_score: empty set");
    VP_CHECK(a.size() == b.size(), "feature_alignment_score: sets must pair 1:1");
    return feature_alignment_from_features(encode_cls_batch(enc, a), encode_cls_batch(enc, b));
}

// --- augmentation -------------------------------------------------------------

ImageSample augment_view(const ImageSample& img, Rng& rng) {
    const int h = img.height(), w = img.width();
    const float area = 0.5f + 0.5f * rng.uniformf();
    const int side = std::max(4, int(std::lround(double(h) * std::sqrt(double(area)))));
    const int y0 = rng.uniform_int(h - side + 1);
    const int x0 = rng.uniform_int(w - side + 1);
    const bool flip = rng.bernoulli(0.5);
    float gain[3], bias[3];
    for (int c = 0; c < 3; ++c) {
        gain[c] = 1.0f + 0.2f * (rng.uniformf() * 2.0f - 1.0f);
        bias[c] = 0.1f * (rng.uniformf() * 2.0f - 1.0f);
    }

    ImageSample out;
    out.label = img.label;
    out.caption = img.caption;
    out.pixels = Tensor::zeros({3, h, w});
    const float sc = float(side) / float(h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int xs = flip ? (w - 1 - x) : x;
            const float fy = (float(y) + 0.5f) * sc - 0.5f + float(y0);
            const float fx = (float(xs) + 0.5f) * sc - 0.5f + float(x0);
            const int iy = int(std::floor(fy)), ix = int(std::floor(fx));
            const float wy = fy - float(iy), wx = fx - float(ix);
            for (int c = 0; c < 3; ++c) {
                auto at = [&](int yy, int xx) -> float {
                    yy = std::clamp(yy, 0, h - 1);
                    xx = std::clamp(xx, 0, w - 1);
                    return img.pixels[(size_t(c) * h + yy) * w + xx];
                };
                float v = (1 - wy) * ((1 - wx) * at(iy, ix) + wx * at(iy, ix + 1)) +
                          wy * ((1 - wx) * at(iy + 1, ix) + wx * at(iy + 1, ix + 1));
                v = v * gain[c] + bias[c];
                out.pixels[(size_t(c) * h + y) * w + x] = std::clamp(v, -1.0f, 1.0f);
            }
        }
    return out;
}

// --- self-distillation ------------------------------------------------------------

namespace {

struct DinoHead {
    Mlp mlp;
    DinoHead() = default;
    DinoHead(ParameterStore& ps, const EncoderConfig& cfg, Rng& rng) {
        mlp = Mlp(ps, "head.mlp", cfg.dim, cfg.proj_hidden, cfg.proj_dim, rng);
    }
    // tokens [B,P+1,d] -> logits [B,K] from the CLS row
    Tensor forward(const Tensor& tokens) const {
        Tensor cls = slice_tokens(tokens, 0, 1);
        return mlp.forward(reshape(cls, {tokens.dim(0), tokens.dim(2)}));
    }
};

Tensor stack_views(const std::vector<ImageSample>& views, int side) {
    Tensor out = Tensor::zeros({int(views.size()), 3, side, side});
    for (size_t i = 0; i < views.size(); ++i)
        std::copy(views[i].pixels.ptr(), views[i].pixels.ptr() + views[i].pixels.numel(),
                  out.ptr() + i * 3 * size_t(side) * side);
    return out;
}

// softmax((logits - center)/temp) per row, double precision; returns probs
// and accumulates entropy
Tensor teacher_targets(const Tensor& logits, const std::vector<double>& center, float temp,
                       double* entropy_acc) {
    const int B = logits.dim(0), K = logits.dim(1);
    Tensor probs = Tensor::zeros({B, K});
    for (int b = 0; b < B; ++b) {
        std::vector<double> z(static_cast<size_t>(K));
        double mx = -1e300;
        for (int k = 0; k < K; ++k) {
            z[size_t(k)] = (double(logits[size_t(b) * K + k]) - center[size_t(k)]) / double(temp);
            mx = std::max(mx, z[size_t(k)]);
        }
        double sum = 0.0;
        for (int k = 0; k < K; ++k) {
            z[size_t(k)] = std::exp(z[size_t(k)] - mx);
            sum += z[size_t(k)];
        }
        double ent = 0.0;
        for (int k = 0; k < K; ++k) {
            const double p = z[size_t(k)] / sum;
            probs[size_t(b) * K + k] = float(p);
            if (p > 1e-12) ent -= p * std::log(p);
        }
        if (entropy_acc) *entropy_acc += ent;
    }
    return probs;
}

} // namespace

SslResult ssl_pretrain(const ImageDataset& dataset, const EncoderConfig& cfg, int steps, uint64_t seed,
                       int batch, float lr, int warmup) {
    VP_CHECK(!dataset.samples.empty(), "ssl_pretrain: empty dataset");
    cfg.validate();

    VisionEncoder student(cfg, seed);
    Rng head_rng(hash_combine(seed, 0x4ead));
    DinoHead student_head(student.params, cfg, head_rng);

    VisionEncoder teacher(cfg, seed);
    Rng teacher_head_rng(hash_combine(seed, 0x4ead));
    DinoHead teacher_head(teacher.params, cfg, teacher_head_rng);
    teacher.params.copy_values_from(student.params); // teacher starts as the student

    // EMA writes through aliases straight into the teacher's buffers
    EMAState ema;
    ema.momentum = cfg.ema_momentum;
    for (const auto& name : teacher.params.names()) ema.shadow.add(name, teacher.params.get(name));

    AdamWConfig opt_cfg;
    opt_cfg.lr = lr;
    opt_cfg.weight_decay = 0.03f;
    OptimizerState opt(student.params, opt_cfg);

    std::vector<double> center(static_cast<size_t>(cfg.proj_dim), 0.0);
    const int n = int(dataset.samples.size());
    const int bs = std::min(batch, n);

    SslResult res;
    res.min_teacher_entropy = 1e30;

    for (int step = 0; step < steps; ++step) {
        Rng rng = step_rng(seed, uint64_t(step));
        std::vector<ImageSample> v1, v2;
        for (int i = 0; i < bs; ++i) {
            const ImageSample& src = dataset.samples[size_t(rng.uniform_int(n))];
            Rng ra = rng.split(uint64_t(2 * i));
            Rng rb = rng.split(uint64_t(2 * i + 1));
            v1.push_back(augment_view(src, ra));
            v2.push_back(augment_view(src, rb));
        }
        Tensor x1 = stack_views(v1, cfg.image_size);
        Tensor x2 = stack_views(v2, cfg.image_size);

        Tensor t1, t2;
        {
            NoGradGuard ng;
            t1 = teacher_head.forward(teacher.forward_tokens(x1));
            t2 = teacher_head.forward(teacher.forward_tokens(x2));
        }
        double entropy = 0.0;
        Tensor p1 = teacher_targets(t1, center, cfg.teacher_temp, &entropy);
        Tensor p2 = teacher_targets(t2, center, cfg.teacher_temp, &entropy);
        res.min_teacher_entropy = std::min(res.min_teacher_entropy, entropy / double(2 * bs));

        Tensor s1 = student_head.forward(student.forward_tokens(x1));
        Tensor s2 = student_head.forward(student.forward_tokens(x2));
        Tensor ls1 = log_softmax_rows(scale(s1, 1.0f / cfg.student_temp));
        Tensor ls2 = log_softmax_rows(scale(s2, 1.0f / cfg.student_temp));
        // cross terms only: teacher view 1 teaches student view 2 and vice versa
        Tensor ce = add(sum_all(mul(p1, ls2)), sum_all(mul(p2, ls1)));
        Tensor loss = scale(ce, -0.5f / float(bs));

        if (!std::isfinite(loss.item()))
            throw std::runtime_error("ssl_pretrain aborted: non-finite loss at step " + std::to_string(step));

        student.params.zero_grads();
        backward(loss);
        clip_grad_norm(student.params, 1.0f);
        opt.hp.lr = warmup_lr(step + 1, lr, warmup);
        adamw_step(student.params, student.params.grads(), opt);

        ema_update(ema, student.params);
        // center tracks the mean raw teacher logit over both views
        for (int k = 0; k < cfg.proj_dim; ++k) {
            double mean = 0.0;
            for (int b = 0; b < bs; ++b)
                mean += double(t1[size_t(b) * cfg.proj_dim + k]) + double(t2[size_t(b) * cfg.proj_dim + k]);
            mean /= double(2 * bs);
            center[size_t(k)] =
                cfg.center_momentum * center[size_t(k)] + (1.0 - cfg.center_momentum) * mean;
        }

        res.loss_curve.emplace_back(step + 1, loss.item());
        res.final_loss = loss.item();
    }

    // the EMA teacher is the model that ships; the head is discarded
    for (const auto& name : teacher.params.names())
        if (name.rfind("enc.", 0) == 0) res.weights.add(name, teacher.params.get(name).clone());
    res.student_full = student.params.clone();
    res.teacher_full = teacher.params.clone();
    return res;
}

} // namespace vp
