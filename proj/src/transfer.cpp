#include "visprior/transfer.hpp"

#include <cmath>
#include <cstring>

namespace vp {

// --- text encoder ---------------------------------------------------------------

TextEncoder::TextEncoder(const TextCondConfig& c, uint64_t seed) : cfg(c) {
    Rng rng(hash_combine(seed, 0x7e7));
    tok_embed = params.add("txt.tok", Tensor::trunc_normal({cfg.vocab_size, cfg.embed_dim}, rng, 0.02f, true));
    pos_embed = params.add("txt.pos", Tensor::trunc_normal({cfg.max_len, cfg.embed_dim}, rng, 0.02f, true));
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "txt.block" + std::to_string(i);
        Block b;
        b.ln1 = LayerNorm(params, p + ".ln1", cfg.embed_dim);
        b.attn = MultiheadAttention(params, p + ".attn", cfg.embed_dim, cfg.heads, rng);
        b.ln2 = LayerNorm(params, p + ".ln2", cfg.embed_dim);
        b.mlp = Mlp(params, p + ".mlp", cfg.embed_dim, cfg.embed_dim * 4, cfg.embed_dim, rng);
        blocks.push_back(std::move(b));
    }
    final_ln = LayerNorm(params, "txt.final_ln", cfg.embed_dim);
    out_proj = Linear(params, "txt.out_proj", cfg.embed_dim, cfg.cond_dim, rng);
}

Tensor TextEncoder::forward(const std::vector<int>& ids, int batch) const {
    VP_CHECK(int(ids.size()) == batch * cfg.max_len,
             "text encoder: want batch*max_len ids, got " + std::to_string(ids.size()));
    Tensor x = embedding(ids, batch, cfg.max_len, tok_embed);
    x = add_rows(x, pos_embed);
    for (const auto& b : blocks) {
        Tensor h = b.ln1.forward(x);
        x = add(x, b.attn.forward(h, h));
        x = add(x, b.mlp.forward(b.ln2.forward(x)));
    }
    return out_proj.forward(final_ln.forward(x));
}

// --- t2i --------------------------------------------------------------------------

namespace {
void alias_into(ParameterStore& combined, const ParameterStore& src) {
    for (const auto& name : src.names()) combined.add(name, src.get(name));
}
} // namespace

T2IModel::T2IModel(const BackboneConfig& bb, const TextCondConfig& txt, uint64_t seed)
    : dit(bb, seed), text(txt, hash_combine(seed, 0x712)) {
    VP_CHECK(bb.cond_dim == txt.cond_dim, "t2i: text projection dim must match backbone cond dim");
    alias_into(params, dit.params);
    alias_into(params, text.params);
}

T2IModel build_t2i(const std::optional<CheckpointBundle>& ckpt, const BackboneConfig& bb,
                   const TextCondConfig& txt, uint64_t seed) {
    T2IModel model(bb, txt, seed);
    if (ckpt) {
        for (const auto& name : model.dit.params.names()) {
            const Tensor& src = ckpt->weights.get(name);
            Tensor& dst = model.dit.params.get(name);
            VP_CHECK(src.shape == dst.shape,
                     "build_t2i: incompatible checkpoint shape at '" + name + "'");
            *dst.data = *src.data;
        }
    }
    return model;
}

Tensor t2i_loss(const T2IModel& model, const Tensor& z0, const std::vector<int>& caption_ids,
                const NoiseSchedule& ns, float p_drop, Rng& rng, std::vector<char>* drop_mask_out) {
    const int B = z0.dim(0);
    Tensor live = model.text.forward(caption_ids, B);
    DenoiseFn fn = [&model](const Tensor& z_t, const std::vector<int>& t, const Tensor& cond) {
        return model.dit.denoise(z_t, t, cond);
    };
    return diffusion_loss_fn(fn, model.dit.null_bank, z0, live, ns, p_drop, rng, drop_mask_out);
}

// --- nvs ---------------------------------------------------------------------------

PoseEmbed::PoseEmbed(ParameterStore& ps, int cd, uint64_t seed, int hidden) : cond_dim(cd) {
    Rng rng(hash_combine(seed, 0x905e));
    fc1 = Linear(ps, "pose.fc1", 12, hidden, rng, true, 0.1f);
    fc2 = Linear(ps, "pose.fc2", hidden, cd, rng, true, 0.1f);
}

Tensor PoseEmbed::forward(const std::vector<CameraPose>& poses) const {
    const int B = int(poses.size());
    Tensor in = Tensor::zeros({B, 12});
    for (int b = 0; b < B; ++b) {
        auto flat = flatten_pose(poses[size_t(b)]);
        std::copy(flat.begin(), flat.end(), in.ptr() + size_t(b) * 12);
    }
    Tensor h = fc2.forward(silu(fc1.forward(in)));
    return reshape(h, {B, 1, cond_dim});
}

NvsModel::NvsModel(const BackboneConfig& widened, uint64_t seed) : dit(widened, seed) {
    alias_into(params, dit.params);
    pose = PoseEmbed(params, widened.cond_dim, hash_combine(seed, 0x1272));
}

NvsModel build_nvs(const CheckpointBundle& ckpt, const BackboneConfig& pretrained_cfg, uint64_t seed) {
    BackboneConfig widened = pretrained_cfg;
    widened.in_channels = 2 * pretrained_cfg.latent_channels;
    NvsModel model(widened, seed);

    const int old_rows = pretrained_cfg.patch * pretrained_cfg.patch * pretrained_cfg.in_channels;
    for (const auto& name : model.dit.params.names()) {
        const Tensor& src = ckpt.weights.get(name);
        Tensor& dst = model.dit.params.get(name);
        if (name == "dit.patch_embed.w") {
            // original channels keep their weights; the appended source-latent
            // channels start silent
            VP_CHECK(dst.dim(0) == 2 * old_rows && src.dim(0) == old_rows,
                     "build_nvs: unexpected patch embedding shape");
            std::fill(dst.data->begin(), dst.data->end(), 0.0f);
            std::memcpy(dst.ptr(), src.ptr(), src.numel() * sizeof(float));
            continue;
        }
        VP_CHECK(src.shape == dst.shape, "build_nvs: incompatible checkpoint shape at '" + name + "'");
        *dst.data = *src.data;
    }
    return model;
}

Tensor nvs_loss(const NvsModel& model, const Tensor& target_z0, const Tensor& source_latent,
                const Tensor& source_tokens, const std::vector<CameraPose>& rel_poses,
                const NoiseSchedule& ns, float p_drop, Rng& rng, std::vector<char>* drop_mask_out) {
    VP_CHECK(target_z0.shape == source_latent.shape, "nvs_loss: source/target latent shape mismatch");
    VP_CHECK(int(rel_poses.size()) == target_z0.dim(0), "nvs_loss: pose count mismatch");
    Tensor pose_tok = model.pose.forward(rel_poses);
    Tensor live = concat_tokens(source_tokens, pose_tok); // joint semantic+pose condition
    DenoiseFn fn = [&](const Tensor& z_t, const std::vector<int>& t, const Tensor& cond) {
        return model.dit.denoise(concat_channels(z_t, source_latent), t, cond);
    };
    return diffusion_loss_fn(fn, model.dit.null_bank, target_z0, live, ns, p_drop, rng, drop_mask_out);
}

namespace {
Tensor tokens_for(const VisionEncoder& enc, const ImageSample& img, TokenMode mode, int topk) {
    TokenBundle b = enc.encode(img);
    ConditionTokens ct = select_condition_tokens(b, mode, topk);
    return reshape(ct.tokens, {1, ct.count(), ct.tokens.dim(1)}).detach();
}
} // namespace

ImageSample nvs_sample(const NvsModel& model, const ImageSample& source, const CameraPose& rel,
                       const VisionEncoder& enc, TokenMode mode, int topk, const Autoencoder& ae,
                       const SamplerConfig& sc, const NoiseSchedule& ns) {
    NoGradGuard ng;
    Tensor sem = tokens_for(enc, source, mode, topk);
    Tensor pose_tok = model.pose.forward({rel});
    Tensor cond = concat_tokens(sem, pose_tok).detach();

    Tensor src_latent = ae.encode_sample(source);
    Tensor src_batch = Tensor::zeros({1, src_latent.dim(0), src_latent.dim(1), src_latent.dim(2)});
    std::copy(src_latent.ptr(), src_latent.ptr() + src_latent.numel(), src_batch.ptr());

    Tensor null_cond = model.dit.null_condition_batch(1, cond.dim(1));
    EpsFn fn = [&](const Tensor& z, const std::vector<int>& t, bool conditional) {
        return model.dit.denoise(concat_channels(z, src_batch), t, conditional ? cond : null_cond);
    };
    Tensor z0 = sample_loop(fn, sc, ns, src_batch.shape);
    Tensor one = Tensor::zeros({z0.dim(1), z0.dim(2), z0.dim(3)});
    std::copy(z0.ptr(), z0.ptr() + z0.numel(), one.ptr());
    return ae.decode_sample(one);
}

// --- i2v ----------------------------------------------------------------------------

I2VModel::I2VModel(const BackboneConfig& bb, const I2VConfig& ic, uint64_t seed)
    : cfg(bb), icfg(ic), dit(bb, seed) {
    VP_CHECK(icfg.frames >= 2, "i2v: need at least 2 frames");
    alias_into(params, dit.params);
    Rng rng(hash_combine(seed, 0x12f));
    for (int i = 0; i < bb.depth; ++i) {
        const std::string p = "i2v.temporal" + std::to_string(i);
        TemporalBlock t;
        t.ln = LayerNorm(params, p + ".ln", bb.dim);
        t.attn = MultiheadAttention(params, p + ".attn", bb.dim, bb.heads, rng);
        t.attn.wo.zero_init(); // first forward == per-frame image model
        t.frame_pos = params.add(p + ".frame_pos", Tensor::trunc_normal({icfg.frames, bb.dim}, rng, 0.02f, true));
        temporal.push_back(std::move(t));
    }
}

I2VModel build_i2v(const CheckpointBundle& ckpt, const BackboneConfig& pretrained_cfg,
                   const I2VConfig& icfg, uint64_t seed) {
    I2VModel model(pretrained_cfg, icfg, seed);
    for (const auto& name : model.dit.params.names()) {
        const Tensor& src = ckpt.weights.get(name);
        Tensor& dst = model.dit.params.get(name);
        VP_CHECK(src.shape == dst.shape, "build_i2v: incompatible checkpoint shape at '" + name + "'");
        *dst.data = *src.data;
    }
    return model;
}

size_t temporal_param_count(const BackboneConfig& cfg, const I2VConfig& icfg) {
    const size_t d = size_t(cfg.dim);
    auto lin = [](size_t in, size_t out) { return in * out + out; };
    const size_t per_block = 2 * d                     // layernorm
                             + 4 * lin(d, d) - d       // attention (no k bias)
                             + size_t(icfg.frames) * d; // frame positions
    return per_block * size_t(cfg.depth);
}

Tensor I2VModel::forward(const Tensor& latents, const std::vector<int>& t, const Tensor& cond,
                         int clips) const {
    const int F = icfg.frames;
    VP_CHECK(latents.dim(0) == clips * F, "i2v forward: want clips*frames latents");
    Tensor x = dit.tokens_in(latents);
    Tensor tvec = dit.time_vector(t);
    Tensor cp = dit.project_condition(cond);
    Tensor cvec = dit.condition_vector(tvec, cp);
    const int N = cfg.token_count();

    for (size_t i = 0; i < dit.blocks.size(); ++i) {
        x = dit.blocks[i].forward(x, cvec, cp, cfg.mode);
        // temporal mixing: attention across the F frames at each position
        const TemporalBlock& tb = temporal[i];
        std::vector<Tensor> per_clip;
        for (int b = 0; b < clips; ++b) {
            Tensor clip = slice_dim0(x, b * F, F);             // [F, N, dim]
            Tensor by_pos = transpose_01(clip);                // [N, F, dim]
            Tensor h = tb.ln.forward(add_rows(by_pos, tb.frame_pos));
            Tensor mixed = add(by_pos, tb.attn.forward(h, h)); // zero-init out proj
            per_clip.push_back(transpose_01(mixed));           // [F, N, dim]
        }
        Tensor merged = per_clip[0];
        for (size_t b = 1; b < per_clip.size(); ++b) {
            // concat along dim0 through the token axis
            merged = reshape(concat_tokens(reshape(merged, {1, merged.dim(0) * N, cfg.dim}),
                                           reshape(per_clip[b], {1, F * N, cfg.dim})),
                             {merged.dim(0) + F, N, cfg.dim});
        }
        x = merged;
    }
    return dit.tokens_out(x, cvec, latents.dim(2), latents.dim(3));
}

Tensor i2v_loss(const I2VModel& model, const Tensor& clip_latents, const Tensor& first_frame_tokens,
                const NoiseSchedule& ns, Rng& rng) {
    VP_CHECK(clip_latents.rank() == 5, "i2v_loss: want [B,F,c,h,w]");
    const int B = clip_latents.dim(0), F = clip_latents.dim(1);
    VP_CHECK(F == model.icfg.frames, "i2v_loss: frame count mismatch");
    VP_CHECK(F >= 2, "i2v_loss: need at least 2 frames");
    const int c = clip_latents.dim(2), h = clip_latents.dim(3), w = clip_latents.dim(4);
    const size_t per = size_t(c) * h * w;

    // shared t per clip over frames 1..n; frame 0 rides clean at timestep 0
    std::vector<int> t_clip(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) t_clip[size_t(b)] = rng.uniform_int(ns.T);
    Tensor eps = Tensor::zeros({B, F - 1, c, h, w});
    for (size_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normalf();

    Tensor flat = Tensor::zeros({B * F, c, h, w});
    std::vector<int> t_flat(static_cast<size_t>(B * F), 0);
    for (int b = 0; b < B; ++b) {
        std::memcpy(flat.ptr() + size_t(b * F) * per, clip_latents.ptr() + (size_t(b) * F) * per,
                    sizeof(float) * per); // frame 0 clean
        for (int f = 1; f < F; ++f) {
            const float a = std::sqrt(ns.alpha_bar[size_t(t_clip[size_t(b)])]);
            const float s = std::sqrt(1.0f - ns.alpha_bar[size_t(t_clip[size_t(b)])]);
            const float* z0 = clip_latents.ptr() + (size_t(b) * F + f) * per;
            const float* e = eps.ptr() + (size_t(b) * (F - 1) + f - 1) * per;
            float* dst = flat.ptr() + (size_t(b) * F + f) * per;
            for (size_t i = 0; i < per; ++i) dst[i] = a * z0[i] + s * e[i];
            t_flat[size_t(b * F + f)] = t_clip[size_t(b)];
        }
    }

    // condition tokens of frame 0, broadcast to every frame of the clip
    const int M = first_frame_tokens.dim(1), dc = first_frame_tokens.dim(2);
    VP_CHECK(first_frame_tokens.dim(0) == B, "i2v_loss: token batch mismatch");
    Tensor cond = Tensor::zeros({B * F, M, dc});
    for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f)
            std::memcpy(cond.ptr() + size_t(b * F + f) * M * dc,
                        first_frame_tokens.ptr() + size_t(b) * M * dc, sizeof(float) * size_t(M) * dc);

    Tensor pred = model.forward(flat, t_flat, cond, B); // [B*F, c, h, w]
    // frames 1..n only: slicing keeps the frame-0 prediction out of the graph
    Tensor pred_tokens = reshape(pred, {B, F, c * h * w});
    Tensor pred_rest = slice_tokens(pred_tokens, 1, F - 1);
    Tensor target = reshape(eps, {B, F - 1, c * h * w});
    Tensor loss = mse(pred_rest, target);
    if (!std::isfinite(loss.item())) throw std::runtime_error("i2v_loss: non-finite loss");
    return loss;
}

VideoSample i2v_sample(const ImageSample& first_frame, const I2VModel& model,
                       const VisionEncoder& enc, TokenMode mode, int topk, const Autoencoder& ae,
                       const SamplerConfig& sc, const NoiseSchedule& ns) {
    NoGradGuard ng;
    const int F = model.icfg.frames;
    Tensor f0_latent = ae.encode_sample(first_frame);
    const int c = f0_latent.dim(0), h = f0_latent.dim(1), w = f0_latent.dim(2);
    const size_t per = size_t(c) * h * w;

    Tensor sem = tokens_for(enc, first_frame, mode, topk);
    const int M = sem.dim(1);
    Tensor cond = Tensor::zeros({F, M, sem.dim(2)});
    for (int f = 0; f < F; ++f)
        std::memcpy(cond.ptr() + size_t(f) * M * sem.dim(2), sem.ptr(), sizeof(float) * sem.numel());
    Tensor null_cond = model.dit.null_condition_batch(F, M);

    EpsFn fn = [&](const Tensor& z_rest, const std::vector<int>& t_rest, bool conditional) {
        // assemble [F, c, h, w] with the unmasked conditional frame at t=0
        Tensor flat = Tensor::zeros({F, c, h, w});
        std::memcpy(flat.ptr(), f0_latent.ptr(), sizeof(float) * per);
        std::memcpy(flat.ptr() + per, z_rest.ptr(), sizeof(float) * per * size_t(F - 1));
        std::vector<int> t_flat(static_cast<size_t>(F), 0);
        for (int f = 1; f < F; ++f) t_flat[size_t(f)] = t_rest[size_t(f - 1)];
        Tensor pred = model.forward(flat, t_flat, conditional ? cond : null_cond, 1);
        Tensor pred_rest = Tensor::zeros({F - 1, c, h, w});
        std::memcpy(pred_rest.ptr(), pred.ptr() + per, sizeof(float) * per * size_t(F - 1));
        return pred_rest;
    };
    Tensor z_rest = sample_loop(fn, sc, ns, {F - 1, c, h, w});

    VideoSample out;
    out.frames.push_back(ae.decode_sample(f0_latent)); // unmask contract
    for (int f = 1; f < F; ++f) {
        Tensor one = Tensor::zeros({c, h, w});
        std::memcpy(one.ptr(), z_rest.ptr() + size_t(f - 1) * per, sizeof(float) * per);
        out.frames.push_back(ae.decode_sample(one));
    }
    return out;
}

// --- finetune -------------------------------------------------------------------------

FinetuneResult finetune(ParameterStore& params, const std::function<Tensor(int64_t)>& loss_fn,
                        const TrainConfig& tc, const std::vector<EvalHook>& hooks,
                        OptimizerState* opt_in_out, int64_t start_step) {
    tc.validate();
    FinetuneResult res;
    if (tc.steps <= start_step) {
        res.steps_done = start_step;
        return res;
    }

    OptimizerState local;
    OptimizerState* opt = opt_in_out;
    if (!opt) {
        AdamWConfig hp;
        hp.lr = tc.lr;
        hp.weight_decay = tc.weight_decay;
        local = OptimizerState(params, hp);
        opt = &local;
    }

    DivergenceGuard guard;
    double loss_acc = 0.0;
    int loss_n = 0;

    for (int64_t step = start_step; step < tc.steps; ++step) {
        params.zero_grads();
        Tensor loss = loss_fn(step);
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("finetune: non-finite loss at step " + std::to_string(step));
        if (step == start_step) res.initial_loss = lv;
        res.final_loss = lv;
        loss_acc += lv;
        ++loss_n;

        if (guard.update(lv)) {
            res.aborted = true;
            res.steps_done = step;
            return res;
        }

        backward(loss);
        clip_grad_norm(params, 1.0f);
        opt->hp.lr = warmup_lr(step + 1, tc.lr, std::max(1, tc.warmup));
        adamw_step(params, params.grads(), *opt);

        const int64_t done = step + 1;
        if (tc.eval_interval > 0 && done % tc.eval_interval == 0) {
            res.curve.append(done, "loss", loss_acc / loss_n);
            loss_acc = 0.0;
            loss_n = 0;
        }
        for (const auto& h : hooks) {
            if (done % h.interval != 0) continue;
            const double v = h.fn(done);
            res.curve.append(done, h.metric, v);
            const bool better = res.best_step < 0 || (h.lower_is_better ? v < res.best_metric
                                                                        : v > res.best_metric);
            if (&h == &hooks.front() && better) {
                res.best_step = done;
                res.best_metric = v;
                res.best_weights = params.clone();
            }
        }
        res.steps_done = done;
    }
    return res;
}

} // namespace vp
