#pragma once

#include "visprior/ops.hpp"

namespace vp {

// Parameter-owning building blocks. Construction registers tensors in a
// ParameterStore under "<prefix>.<field>"; module members alias the store's
// buffers, so optimizer updates are visible without re-binding.
//
// Init: truncated normal (std 0.02) for weights, zeros for biases, seeded.

struct Linear {
    Tensor w, b;
    bool has_bias = true;

    Linear() = default;
    Linear(ParameterStore& ps, const std::string& prefix, int in, int out, Rng& rng, bool bias = true,
           float init_std = 0.02f) {
        has_bias = bias;
        w = ps.add(prefix + ".w", Tensor::trunc_normal({in, out}, rng, init_std, true));
        if (bias) b = ps.add(prefix + ".b", Tensor::zeros({out}, true));
    }

    Tensor forward(const Tensor& x) const { return linear(x, w, has_bias ? &b : nullptr); }

    void zero_init() {
        for (auto& v : *w.data) v = 0.0f;
        if (has_bias)
            for (auto& v : *b.data) v = 0.0f;
    }
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParameterStore& ps, const std::string& prefix, int dim) {
        gamma = ps.add(prefix + ".gamma", Tensor::full({dim}, 1.0f, true));
        beta = ps.add(prefix + ".beta", Tensor::zeros({dim}, true));
    }

    Tensor forward(const Tensor& x) const { return layernorm(x, gamma, beta); }
};

// Full attention layer with q/k/v/out projections. Self-attention is the
// queries == keys_values case; cross-attention passes the condition tokens
// as keys_values.
struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;

    MultiheadAttention() = default;
    MultiheadAttention(ParameterStore& ps, const std::string& prefix, int dim, int n_heads, Rng& rng,
                       int kv_dim = -1) {
        VP_CHECK(n_heads >= 1 && dim % n_heads == 0,
                 "attention config: dim " + std::to_string(dim) + " not divisible by heads " +
                     std::to_string(n_heads));
        heads = n_heads;
        if (kv_dim < 0) kv_dim = dim;
        wq = Linear(ps, prefix + ".q", dim, dim, rng);
        // no key bias: softmax weights are invariant to a constant shift of
        // every key, so the parameter would be dead by construction
        wk = Linear(ps, prefix + ".k", kv_dim, dim, rng, false);
        wv = Linear(ps, prefix + ".v", kv_dim, dim, rng);
        wo = Linear(ps, prefix + ".o", dim, dim, rng);
    }

    // queries [B,Nq,D], keys_values [B,Nk,Dkv] -> [B,Nq,D]
    Tensor forward(const Tensor& queries, const Tensor& keys_values,
                   std::shared_ptr<std::vector<float>>* attn_out = nullptr) const {
        Tensor q = wq.forward(queries);
        Tensor k = wk.forward(keys_values);
        Tensor v = wv.forward(keys_values);
        return wo.forward(attention(q, k, v, heads, attn_out));
    }
};

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParameterStore& ps, const std::string& prefix, int dim, int hidden, int out, Rng& rng) {
        fc1 = Linear(ps, prefix + ".fc1", dim, hidden, rng);
        fc2 = Linear(ps, prefix + ".fc2", hidden, out, rng);
    }

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

struct Conv2d {
    Tensor w, b;
    int stride = 1, pad = 0;
    bool has_bias = true;

    Conv2d() = default;
    Conv2d(ParameterStore& ps, const std::string& prefix, int in, int out, int k, int stride_, int pad_,
           Rng& rng, float init_std = 0.02f) {
        stride = stride_;
        pad = pad_;
        w = ps.add(prefix + ".w", Tensor::trunc_normal({out, in, k, k}, rng, init_std, true));
        b = ps.add(prefix + ".b", Tensor::zeros({out}, true));
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, &b, stride, pad); }
};

} // namespace vp
