#include "chamtoy/layers.hpp"

#include <cmath>
#include <numeric>

#include "chamtoy/kernels.hpp"

namespace chamtoy {

Tensor rms_norm(const Tensor& x, const Tensor& gain, Scalar eps) {
  if (x.rank() == 0) throw ShapeError("rms_norm on a rank-0 tensor");
  if (eps < 0) throw DomainError("rms_norm: eps must be non-negative");
  const std::size_t d = x.extent(-1);
  if (gain.rank() != 1 || gain.numel() != d) {
    throw ShapeError("rms_norm gain " + shape_str(gain.shape()) +
                     " does not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<Scalar> out(x.numel());
  std::vector<Scalar> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = xd.data() + r * d;
    Scalar ms = 0;
    for (std::size_t t = 0; t < d; ++t) ms += xr[t] * xr[t];
    ms = ms / static_cast<Scalar>(d) + eps;
    if (!(ms > 0)) throw DomainError("rms_norm: zero vector with eps = 0");
    inv[r] = 1 / std::sqrt(ms);
    for (std::size_t t = 0; t < d; ++t) out[r * d + t] = xr[t] * inv[r] * gd[t];
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), gain.node()}, "rms_norm",
      [d, rows, inv = std::move(inv)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* xr = px.data.data() + r * d;
          const Scalar* gy = self.grad.data() + r * d;
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            Scalar dot = 0;
            for (std::size_t t = 0; t < d; ++t) dot += gy[t] * pg.data[t] * xr[t];
            const Scalar c = inv[r] * inv[r] * inv[r] * dot / static_cast<Scalar>(d);
            for (std::size_t t = 0; t < d; ++t) {
              gx[r * d + t] += inv[r] * pg.data[t] * gy[t] - c * xr[t];
            }
          }
          if (pg.requires_grad) {
            auto& gg = pg.ensure_grad();
            for (std::size_t t = 0; t < d; ++t) gg[t] += gy[t] * xr[t] * inv[r];
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, Scalar eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm on a rank-0 tensor");
  if (eps < 0) throw DomainError("layer_norm: eps must be non-negative");
  const auto& xs = x.shape();
  const auto& gs = gain.shape();
  if (gs.empty() || gs.size() > xs.size() ||
      !std::equal(gs.begin(), gs.end(), xs.end() - static_cast<std::ptrdiff_t>(gs.size()))) {
    throw ShapeError("layer_norm gain " + shape_str(gs) +
                     " does not match trailing dims of " + shape_str(xs));
  }
  const std::size_t d = xs.back();
  const std::size_t gn = gain.numel();
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<Scalar> out(x.numel());
  std::vector<Scalar> xhat(x.numel());
  std::vector<Scalar> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = xd.data() + r * d;
    Scalar mu = 0;
    for (std::size_t t = 0; t < d; ++t) mu += xr[t];
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::size_t t = 0; t < d; ++t) var += (xr[t] - mu) * (xr[t] - mu);
    var = var / static_cast<Scalar>(d) + eps;
    const std::size_t goff = (r * d) % gn;
    if (!(var > 0)) {
      // Constant vector with eps = 0: mean removal leaves zeros.
      inv[r] = 0;
    } else {
      inv[r] = 1 / std::sqrt(var);
    }
    for (std::size_t t = 0; t < d; ++t) {
      xhat[r * d + t] = (xr[t] - mu) * inv[r];
      out[r * d + t] = xhat[r * d + t] * gd[goff + t];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), gain.node()}, "layer_norm",
      [d, rows, gn, inv = std::move(inv), xhat = std::move(xhat)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        std::vector<Scalar> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t goff = (r * d) % gn;
          const Scalar* gy = self.grad.data() + r * d;
          const Scalar* xh = xhat.data() + r * d;
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            Scalar m1 = 0, m2 = 0;
            for (std::size_t t = 0; t < d; ++t) {
              dxhat[t] = gy[t] * pg.data[goff + t];
              m1 += dxhat[t];
              m2 += dxhat[t] * xh[t];
            }
            m1 /= static_cast<Scalar>(d);
            m2 /= static_cast<Scalar>(d);
            for (std::size_t t = 0; t < d; ++t) {
              gx[r * d + t] += inv[r] * (dxhat[t] - m1 - xh[t] * m2);
            }
          }
          if (pg.requires_grad) {
            auto& gg = pg.ensure_grad();
            for (std::size_t t = 0; t < d; ++t) gg[goff + t] += gy[t] * xh[t];
          }
        }
      });
}

Tensor silu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xd[i] / (1 + std::exp(-xd[i]));
  }
  return detail::make_result(x.shape(), std::move(out), {x.node()}, "silu",
                             [](Node& self) {
                               Node& p = *self.parents[0];
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const Scalar z = p.data[i];
                                 const Scalar s = 1 / (1 + std::exp(-z));
                                 g[i] += self.grad[i] * s * (1 + z * (1 - s));
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (x.rank() == 2) return matmul(x, w);
  if (x.rank() == 0 || w.rank() != 2) throw ShapeError("linear: bad ranks");
  const std::size_t in = x.extent(-1);
  Shape out_shape = x.shape();
  out_shape.back() = w.shape()[1];
  return reshape(matmul(reshape(x, {x.numel() / in, in}), w),
                 std::move(out_shape));
}

Tensor swiglu_gate(const Tensor& x, const Tensor& w1, const Tensor& w3) {
  return mul(silu(linear(x, w1)), linear(x, w3));
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w1, const Tensor& w2,
                  const Tensor& w3) {
  return linear(swiglu_gate(x, w1, w3), w2);
}

Tensor rope(const Tensor& x, std::span<const std::size_t> positions,
            Scalar base) {
  if (x.rank() != 3) {
    throw ShapeError("rope expects [seq, heads, head_dim], got " +
                     shape_str(x.shape()));
  }
  const std::size_t seq = x.shape()[0], n = x.shape()[1], hd = x.shape()[2];
  if (hd % 2 != 0) throw ShapeError("rope needs an even head_dim");
  if (positions.size() != seq) throw ShapeError("rope: positions length");
  std::vector<Scalar> cosv(seq * hd / 2), sinv(seq * hd / 2);
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const Scalar theta = std::pow(base, -static_cast<Scalar>(2 * i) /
                                              static_cast<Scalar>(hd));
      const Scalar angle = static_cast<Scalar>(positions[s]) * theta;
      cosv[s * hd / 2 + i] = std::cos(angle);
      sinv[s * hd / 2 + i] = std::sin(angle);
    }
  }
  const auto xd = x.data();
  std::vector<Scalar> out(x.numel());
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t h = 0; h < n; ++h) {
      const std::size_t off = (s * n + h) * hd;
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const Scalar c = cosv[s * hd / 2 + i], sn = sinv[s * hd / 2 + i];
        const Scalar a = xd[off + 2 * i], b = xd[off + 2 * i + 1];
        out[off + 2 * i] = a * c - b * sn;
        out[off + 2 * i + 1] = a * sn + b * c;
      }
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node()}, "rope",
      [seq, n, hd, cosv = std::move(cosv), sinv = std::move(sinv)](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t s = 0; s < seq; ++s) {
          for (std::size_t h = 0; h < n; ++h) {
            const std::size_t off = (s * n + h) * hd;
            for (std::size_t i = 0; i < hd / 2; ++i) {
              const Scalar c = cosv[s * hd / 2 + i], sn = sinv[s * hd / 2 + i];
              const Scalar ga = self.grad[off + 2 * i];
              const Scalar gb = self.grad[off + 2 * i + 1];
              g[off + 2 * i] += ga * c + gb * sn;
              g[off + 2 * i + 1] += -ga * sn + gb * c;
            }
          }
        }
      });
}

std::pair<Tensor, Tensor> qk_norm(const Tensor& q, const Tensor& k,
                                  const Tensor& q_gain, const Tensor& k_gain,
                                  Scalar eps) {
  if (q.rank() != 3 || k.rank() != 3) {
    throw ShapeError("qk_norm expects [seq, heads, head_dim] inputs");
  }
  if (q_gain.rank() != 2 || k_gain.rank() != 2) {
    throw ShapeError("qk_norm gains must be [heads, head_dim]");
  }
  return {layer_norm(q, q_gain, eps), layer_norm(k, k_gain, eps)};
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::vector<Scalar>* weights) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("causal_attention expects rank-3 q, k, v");
  }
  kernels::AttentionDims dims;
  dims.seq = q.shape()[0];
  dims.n_heads = q.shape()[1];
  dims.head_dim = q.shape()[2];
  dims.n_kv_heads = k.shape()[1];
  if (k.shape() != v.shape() || k.shape()[0] != dims.seq ||
      k.shape()[2] != dims.head_dim) {
    throw ShapeError("causal_attention: k/v shapes " + shape_str(k.shape()) +
                     ", " + shape_str(v.shape()) + " do not match q " +
                     shape_str(q.shape()));
  }
  if (dims.n_kv_heads == 0 || dims.n_heads % dims.n_kv_heads != 0) {
    throw ShapeError("n_kv_heads must divide n_heads");
  }
  dims.scale = 1 / std::sqrt(static_cast<Scalar>(dims.head_dim));
  std::vector<Scalar> probs(dims.n_heads * dims.seq * dims.seq);
  std::vector<Scalar> out(q.numel());
  kernels::attention_forward(dims, q.data(), k.data(), v.data(), probs, out);
  if (weights) *weights = probs;
  return detail::make_result(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()}, "attention",
      [dims, probs = std::move(probs)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        // Scratch buffers stand in for parents that do not need gradients.
        std::vector<Scalar> sq, sk, sv;
        auto target = [](Node& p, std::vector<Scalar>& scratch)
            -> std::span<Scalar> {
          if (p.requires_grad) return p.ensure_grad();
          scratch.assign(p.data.size(), Scalar{0});
          return scratch;
        };
        kernels::attention_backward(dims, pq.data, pk.data, pv.data, probs,
                                    self.grad, target(pq, sq), target(pk, sk),
                                    target(pv, sv));
      });
}

Tensor causal_gqa_attention(const Tensor& x, const LayerParams& params,
                            const AttentionConfig& cfg, bool train, Rng* rng,
                            std::vector<Scalar>* weights) {
  if (x.rank() != 2) throw ShapeError("attention input must be [seq, d_model]");
  const std::size_t seq = x.shape()[0];
  if (seq > cfg.context_length) {
    throw ShapeError("sequence length " + std::to_string(seq) +
                     " exceeds context length " +
                     std::to_string(cfg.context_length));
  }
  if (cfg.n_kv_heads == 0 || cfg.n_heads % cfg.n_kv_heads != 0) {
    throw ShapeError("n_kv_heads must divide n_heads");
  }
  Tensor q = reshape(matmul(x, params.wq), {seq, cfg.n_heads, cfg.head_dim});
  Tensor k = reshape(matmul(x, params.wk), {seq, cfg.n_kv_heads, cfg.head_dim});
  Tensor v = reshape(matmul(x, params.wv), {seq, cfg.n_kv_heads, cfg.head_dim});
  std::vector<std::size_t> positions(seq);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  if (cfg.use_qk_norm && !cfg.qk_norm_after_rope) {
    std::tie(q, k) = qk_norm(q, k, params.q_norm, params.k_norm, cfg.eps);
  }
  q = rope(q, positions, cfg.rope_base);
  k = rope(k, positions, cfg.rope_base);
  if (cfg.use_qk_norm && cfg.qk_norm_after_rope) {
    std::tie(q, k) = qk_norm(q, k, params.q_norm, params.k_norm, cfg.eps);
  }
  Tensor attn = causal_attention(q, k, v, weights);
  Tensor out = matmul(reshape(attn, {seq, cfg.n_heads * cfg.head_dim}),
                      params.wo);
  if (train && cfg.dropout_p > 0) {
    if (!rng) throw ConfigError("training-mode dropout needs an rng");
    out = dropout(out, cfg.dropout_p, train, *rng);
  }
  return out;
}

Tensor dropout(const Tensor& x, Scalar p, bool train, Rng& rng) {
  if (!(p >= 0 && p < 1)) {
    throw DomainError("dropout probability must be in [0, 1)");
  }
  if (!train || p == 0) return x;
  const Scalar keep_scale = 1 / (1 - p);
  std::vector<Scalar> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : Scalar{0};
  const auto xd = x.data();
  std::vector<Scalar> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return detail::make_result(x.shape(), std::move(out), {x.node()}, "dropout",
                             [mask = std::move(mask)](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] * mask[i];
                               }
                             });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<Scalar> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t s = 0; s < ids.size(); ++s) {
    if (ids[s] >= vocab) {
      throw DataError("token id " + std::to_string(ids[s]) +
                      " out of range for vocabulary of " +
                      std::to_string(vocab));
    }
    std::copy_n(td.data() + ids[s] * d, d, out.data() + s * d);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), {table.node()},
                             "embedding",
                             [d, saved = std::move(saved)](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t s = 0; s < saved.size(); ++s) {
                                 for (std::size_t t = 0; t < d; ++t) {
                                   g[saved[s] * d + t] += self.grad[s * d + t];
                                 }
                               }
                             });
}

}  // namespace chamtoy
