#include "visprior/backbone.hpp"

#include <cmath>

namespace vp {

CondMode cond_mode_from_string(const std::string& s) {
    if (s == "cross_attention") return CondMode::CrossAttention;
    if (s == "adaln_zero_cond") return CondMode::AdaLnZeroCond;
    throw std::runtime_error("unknown conditioning mode: " + s);
}

std::string to_string(CondMode m) {
    return m == CondMode::CrossAttention ? "cross_attention" : "adaln_zero_cond";
}

TimestepEmbedding::TimestepEmbedding(int d) : dim(d) {
    VP_CHECK(d >= 2 && d % 2 == 0, "timestep embedding: dim must be even");
    const int half = d / 2;
    freqs.resize(size_t(half));
    for (int i = 0; i < half; ++i)
        freqs[size_t(i)] = float(std::exp(-std::log(10000.0) * double(i) / double(half)));
}

Tensor TimestepEmbedding::embed(const std::vector<int>& t) const {
    const int B = int(t.size());
    const int half = dim / 2;
    Tensor out = Tensor::zeros({B, dim});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < half; ++i) {
            const double arg = double(t[size_t(b)]) * double(freqs[size_t(i)]);
            out[size_t(b) * dim + i] = float(std::cos(arg));
            out[size_t(b) * dim + half + i] = float(std::sin(arg));
        }
    return out;
}

namespace {
// modulated layernorm without learnable affine; shift/scale come from cvec
Tensor norm_noaffine(const Tensor& x) {
    static thread_local std::unordered_map<int, std::pair<Tensor, Tensor>> cache;
    const int d = x.shape.back();
    auto it = cache.find(d);
    if (it == cache.end())
        it = cache.emplace(d, std::make_pair(Tensor::full({d}, 1.0f), Tensor::zeros({d}))).first;
    return layernorm(x, it->second.first, it->second.second);
}
} // namespace

Tensor DiTBlock::forward(const Tensor& x, const Tensor& cvec, const Tensor& cond_proj,
                         CondMode mode) const {
    Tensor m = mod.forward(silu(cvec)); // [B, 6*dim]
    const int d = x.shape.back();
    Tensor sh1 = slice_lastdim(m, 0, d);
    Tensor sc1 = slice_lastdim(m, d, d);
    Tensor g1 = slice_lastdim(m, 2 * d, d);
    Tensor sh2 = slice_lastdim(m, 3 * d, d);
    Tensor sc2 = slice_lastdim(m, 4 * d, d);
    Tensor g2 = slice_lastdim(m, 5 * d, d);

    Tensor h = affine_tokens(norm_noaffine(x), sc1, sh1);
    Tensor out = add(x, gate_tokens(self_attn.forward(h, h), g1));
    if (mode == CondMode::CrossAttention) {
        VP_CHECK(cond_proj.defined(), "DiTBlock: cross_attention mode needs condition tokens");
        out = add(out, cross_attn.forward(norm_noaffine(out), cond_proj));
    }
    Tensor h2 = affine_tokens(norm_noaffine(out), sc2, sh2);
    return add(out, gate_tokens(mlp.forward(h2), g2));
}

DiT::DiT(const BackboneConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(hash_combine(seed, 0xd17));
    const int N = cfg.token_count();
    const int td = cfg.patch * cfg.patch * cfg.in_channels;

    patch_embed = Linear(params, "dit.patch_embed", td, cfg.dim, rng);
    pos_embed = params.add("dit.pos", Tensor::trunc_normal({N, cfg.dim}, rng, 0.02f, true));
    sinusoid = TimestepEmbedding(cfg.dim);
    t_fc1 = Linear(params, "dit.t_fc1", cfg.dim, cfg.dim, rng);
    t_fc2 = Linear(params, "dit.t_fc2", cfg.dim, cfg.dim, rng);
    cond_proj = Linear(params, "dit.cond_proj", cfg.cond_dim, cfg.dim, rng);
    null_bank = params.add("dit.null_bank",
                           Tensor::trunc_normal({cfg.max_cond_tokens, cfg.cond_dim}, rng, 0.02f, true));

    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "dit.block" + std::to_string(i);
        DiTBlock b;
        b.self_attn = MultiheadAttention(params, p + ".self", cfg.dim, cfg.heads, rng);
        if (cfg.mode == CondMode::CrossAttention) {
            b.cross_attn = MultiheadAttention(params, p + ".cross", cfg.dim, cfg.heads, rng);
            b.cross_attn.wo.zero_init(); // inserted attention starts silent
        }
        b.mlp = Mlp(params, p + ".mlp", cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dim, rng);
        b.mod = Linear(params, p + ".mod", cfg.dim, 6 * cfg.dim, rng);
        b.mod.zero_init(); // adaLN-Zero: blocks start as identities
        blocks.push_back(std::move(b));
    }
    final_mod = Linear(params, "dit.final_mod", cfg.dim, 2 * cfg.dim, rng);
    final_mod.zero_init();
    final_linear = Linear(params, "dit.final_linear", cfg.dim, cfg.patch * cfg.patch * cfg.latent_channels, rng);
    final_linear.zero_init();
}

Tensor DiT::tokens_in(const Tensor& z) const {
    VP_CHECK(z.rank() == 4, "denoise: want latent [B,C,h,w]");
    VP_CHECK(z.dim(1) == cfg.in_channels,
             "denoise: latent has " + std::to_string(z.dim(1)) + " channels, backbone expects " +
                 std::to_string(cfg.in_channels));
    VP_CHECK(z.dim(2) == cfg.latent_side && z.dim(3) == cfg.latent_side, "denoise: latent side mismatch");
    Tensor x = patch_embed.forward(patchify(z, cfg.patch));
    return add_rows(x, pos_embed);
}

Tensor DiT::time_vector(const std::vector<int>& t) const {
    return t_fc2.forward(silu(t_fc1.forward(sinusoid.embed(t))));
}

Tensor DiT::project_condition(const Tensor& cond) const {
    VP_CHECK(cond.rank() == 3, "denoise: want condition [B,M,d_c]");
    VP_CHECK(cond.dim(2) == cfg.cond_dim, "denoise: condition dim mismatch");
    VP_CHECK(cond.dim(1) <= cfg.max_cond_tokens,
             "denoise: " + std::to_string(cond.dim(1)) + " condition tokens exceed max " +
                 std::to_string(cfg.max_cond_tokens));
    return cond_proj.forward(cond);
}

Tensor DiT::condition_vector(const Tensor& tvec, const Tensor& cond_projected) const {
    if (cfg.mode == CondMode::CrossAttention) return tvec;
    // adaLN-Zero conditioning: mean-pooled condition added to the timestep
    return add(tvec, mean_tokens(cond_projected));
}

Tensor DiT::tokens_out(const Tensor& x, const Tensor& cvec, int h, int w) const {
    Tensor m = final_mod.forward(silu(cvec));
    Tensor sh = slice_lastdim(m, 0, cfg.dim);
    Tensor sc = slice_lastdim(m, cfg.dim, cfg.dim);
    Tensor y = affine_tokens(norm_noaffine(x), sc, sh);
    return unpatchify(final_linear.forward(y), cfg.latent_channels, h, w, cfg.patch);
}

Tensor DiT::denoise(const Tensor& z, const std::vector<int>& t, const Tensor& cond) const {
    VP_CHECK(int(t.size()) == z.dim(0), "denoise: timestep count must match batch");
    VP_CHECK(cond.dim(0) == z.dim(0), "denoise: condition batch mismatch");
    Tensor x = tokens_in(z);
    Tensor tvec = time_vector(t);
    Tensor cp = project_condition(cond);
    Tensor cvec = condition_vector(tvec, cp);
    for (const auto& b : blocks) x = b.forward(x, cvec, cp, cfg.mode);
    return tokens_out(x, cvec, z.dim(2), z.dim(3));
}

Tensor DiT::null_condition(int len) const {
    VP_CHECK(len >= 1 && len <= cfg.max_cond_tokens,
             "null_condition: length " + std::to_string(len) + " outside [1, max]");
    return slice_dim0(null_bank, 0, len);
}

Tensor DiT::null_condition_batch(int batch, int len) const {
    Tensor one = reshape(null_condition(len), {1, len, cfg.cond_dim});
    Tensor out = Tensor::zeros({batch, len, cfg.cond_dim});
    // broadcast without grad: sampling-time helper
    for (int b = 0; b < batch; ++b)
        std::copy(one.ptr(), one.ptr() + one.numel(), out.ptr() + size_t(b) * one.numel());
    return out;
}

size_t backbone_param_count(const BackboneConfig& cfg) {
    const size_t d = size_t(cfg.dim);
    const size_t N = size_t(cfg.token_count());
    const size_t td = size_t(cfg.patch) * cfg.patch * cfg.in_channels;
    const size_t od = size_t(cfg.patch) * cfg.patch * cfg.latent_channels;
    auto lin = [](size_t in, size_t out) { return in * out + out; };

    size_t n = 0;
    n += lin(td, d);                     // patch embed
    n += N * d;                          // positional table
    n += lin(d, d) * 2;                  // timestep MLP
    n += lin(size_t(cfg.cond_dim), d);   // condition projection
    n += size_t(cfg.max_cond_tokens) * cfg.cond_dim; // null bank
    size_t block = 4 * lin(d, d) - d                   // self attention (no k bias)
                   + lin(d, d * size_t(cfg.mlp_ratio)) // mlp in
                   + lin(d * size_t(cfg.mlp_ratio), d) // mlp out
                   + lin(d, 6 * d);                    // modulation
    if (cfg.mode == CondMode::CrossAttention) block += 4 * lin(d, d) - d;
    n += block * size_t(cfg.depth);
    n += lin(d, 2 * d); // final modulation
    n += lin(d, od);    // final projection
    return n;
}

} // namespace vp
