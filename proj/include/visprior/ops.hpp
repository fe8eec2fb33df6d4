#pragma once

#include <optional>

#include "visprior/tensor.hpp"

namespace vp {

// Reverse-mode ops. Conventions:
//   token sequences   [B, N, D]
//   images / latents  [B, C, H, W]
// Outputs carry a Node when grad mode is on and any parent requires grad.
// Every reduction accumulates in double so results do not depend on how
// work is split across threads.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

// x: [..., in], w: [in, out], b: [out] (optional) -> [..., out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b);

// a: [m, k], b: [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);

// add bias over the last dim
Tensor add_bias(const Tensor& x, const Tensor& b);

// broadcast-add rows r [N, D] to every batch entry of x [B, N, D]
Tensor add_rows(const Tensor& x, const Tensor& r);

// scaled dot-product attention over projected heads.
// q: [B, Nq, D], k/v: [B, Nk, D]; D % heads == 0.
// If attn_out is given it receives the weights, laid out [B, H, Nq, Nk].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::shared_ptr<std::vector<float>>* attn_out = nullptr);

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor exp_act(const Tensor& x);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// x: [B, C, H, W], w: [O, C, kh, kw], b: [O] optional
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad);

Tensor upsample_nearest2x(const Tensor& x);

// [B, C, H, W] -> [B, P, p*p*C] with patches row-major over the grid and
// (c, py, px) order inside a token; unpatchify is the exact inverse.
Tensor patchify(const Tensor& x, int p);
Tensor unpatchify(const Tensor& tokens, int c, int h, int w, int p);

Tensor concat_tokens(const Tensor& a, const Tensor& b);            // along N
Tensor slice_tokens(const Tensor& x, int start, int len);          // along N
Tensor concat_channels(const Tensor& a, const Tensor& b);          // along C
Tensor slice_dim0(const Tensor& x, int start, int len);

// ids: B*L entries in [0, V); table: [V, D] -> [B, L, D]
Tensor embedding(const std::vector<int>& ids, int b, int l, const Tensor& table);

Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor mean_tokens(const Tensor& x);                               // [B,N,D] -> [B,D]
Tensor affine_tokens(const Tensor& x, const Tensor& sc, const Tensor& sh); // x*(1+sc)+sh
Tensor gate_tokens(const Tensor& x, const Tensor& g);              // x*g

Tensor slice_lastdim(const Tensor& x, int start, int len);
Tensor reshape(const Tensor& x, const Shape& s);
Tensor transpose_01(const Tensor& x);                              // [A,B,D] -> [B,A,D]

// Per-sample condition selection for classifier-free guidance training:
// out[b] = drop[b] ? bank[0:M] : live[b]. Gradients flow to whichever
// source was selected and only to it.
Tensor compose_condition(const Tensor& live, const Tensor& bank, const std::vector<char>& drop);

} // namespace vp
