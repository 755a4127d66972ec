#ifndef CHAMTOY_LAYERS_HPP_
#define CHAMTOY_LAYERS_HPP_

#include <span>
#include <utility>
#include <vector>

#include "chamtoy/tensor.hpp"

namespace chamtoy {

// Learnable tensors of one transformer block. Projections are stored as
// [in, out] and applied to row vectors (x * W). No biases anywhere.
struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor ffn_norm;   // [d]
  Tensor wq;         // [d, n_heads * head_dim]
  Tensor wk;         // [d, n_kv_heads * head_dim]
  Tensor wv;         // [d, n_kv_heads * head_dim]
  Tensor wo;         // [n_heads * head_dim, d]
  Tensor w1;         // [d, d_ff]
  Tensor w3;         // [d, d_ff]
  Tensor w2;         // [d_ff, d]
  Tensor q_norm;     // [n_heads, head_dim]
  Tensor k_norm;     // [n_kv_heads, head_dim]
};

struct AttentionConfig {
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
  std::size_t context_length = 1;
  bool use_qk_norm = false;
  // QK-Norm runs before RoPE unless this is set.
  bool qk_norm_after_rope = false;
  Scalar eps = 1e-5;
  Scalar rope_base = 10000;
  Scalar dropout_p = 0;
};

// y = x / sqrt(mean(x^2) + eps) * gain, over the last axis. eps may be zero,
// in which case an all-zero vector is a domain error.
Tensor rms_norm(const Tensor& x, const Tensor& gain, Scalar eps);

// Layer norm without bias over the last axis. `gain` matches the trailing
// dims of x, so a [heads, head_dim] gain gives per-head gains.
Tensor layer_norm(const Tensor& x, const Tensor& gain, Scalar eps);

Tensor silu(const Tensor& x);

// x * w for x of shape [..., in].
Tensor linear(const Tensor& x, const Tensor& w);

// silu(x W1) * (x W3), the input to W2.
Tensor swiglu_gate(const Tensor& x, const Tensor& w1, const Tensor& w3);
Tensor swiglu_ffn(const Tensor& x, const Tensor& w1, const Tensor& w2,
                  const Tensor& w3);

// Rotates consecutive pairs of x:[seq, n, head_dim] by pos * base^(-2i/hd).
Tensor rope(const Tensor& x, std::span<const std::size_t> positions,
            Scalar base = 10000);

std::pair<Tensor, Tensor> qk_norm(const Tensor& q, const Tensor& k,
                                  const Tensor& q_gain, const Tensor& k_gain,
                                  Scalar eps);

// Causal scaled dot-product attention over q:[seq,H,hd], k,v:[seq,KV,hd].
// Query head h reads KV head h / (H / KV). When `weights` is given it
// receives the [H, seq, seq] attention matrix.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::vector<Scalar>* weights = nullptr);

// Projections, optional QK-Norm, RoPE, causal attention, output projection,
// then dropout on the result.
Tensor causal_gqa_attention(const Tensor& x, const LayerParams& params,
                            const AttentionConfig& cfg, bool train, Rng* rng,
                            std::vector<Scalar>* weights = nullptr);

// Inverted dropout in training mode, identity otherwise.
Tensor dropout(const Tensor& x, Scalar p, bool train, Rng& rng);

// Rows of table:[vocab, d] selected by ids.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

}  // namespace chamtoy

#endif  // CHAMTOY_LAYERS_HPP_
