#include "chamtoy/inference.hpp"

#include <algorithm>
#include <cmath>

#include "chamtoy/random.hpp"

namespace chamtoy {

namespace {

// y[n] = x[k] . w[k, n]
std::vector<Scalar> matvec(std::span<const Scalar> x, const Tensor& w) {
  const std::size_t k = w.shape()[0], n = w.shape()[1];
  const auto wd = w.data();
  std::vector<Scalar> y(n, Scalar{0});
  for (std::size_t i = 0; i < k; ++i) {
    const Scalar xi = x[i];
    const Scalar* row = wd.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += xi * row[j];
  }
  return y;
}

std::vector<Scalar> rms(std::span<const Scalar> x, const Tensor& gain,
                        Scalar eps) {
  const std::size_t d = x.size();
  Scalar ms = 0;
  for (Scalar v : x) ms += v * v;
  ms = ms / static_cast<Scalar>(d) + eps;
  if (!(ms > 0)) throw DomainError("rms_norm: zero vector with eps = 0");
  const Scalar inv = 1 / std::sqrt(ms);
  const auto g = gain.data();
  std::vector<Scalar> out(d);
  for (std::size_t t = 0; t < d; ++t) out[t] = x[t] * inv * g[t];
  return out;
}

// Layer norm without bias over each head_dim chunk, gains [heads, hd].
void head_layer_norm(std::span<Scalar> x, std::size_t heads, std::size_t hd,
                     const Tensor& gain, Scalar eps) {
  const auto g = gain.data();
  for (std::size_t h = 0; h < heads; ++h) {
    Scalar* r = x.data() + h * hd;
    Scalar mu = 0;
    for (std::size_t t = 0; t < hd; ++t) mu += r[t];
    mu /= static_cast<Scalar>(hd);
    Scalar var = 0;
    for (std::size_t t = 0; t < hd; ++t) var += (r[t] - mu) * (r[t] - mu);
    var = var / static_cast<Scalar>(hd) + eps;
    const Scalar inv = var > 0 ? 1 / std::sqrt(var) : Scalar{0};
    for (std::size_t t = 0; t < hd; ++t) r[t] = (r[t] - mu) * inv * g[h * hd + t];
  }
}

void rotate(std::span<Scalar> x, std::size_t heads, std::size_t hd,
            std::size_t pos, Scalar base) {
  for (std::size_t i = 0; i < hd / 2; ++i) {
    const Scalar theta =
        std::pow(base, -static_cast<Scalar>(2 * i) / static_cast<Scalar>(hd));
    const Scalar angle = static_cast<Scalar>(pos) * theta;
    const Scalar c = std::cos(angle), s = std::sin(angle);
    for (std::size_t h = 0; h < heads; ++h) {
      Scalar* r = x.data() + h * hd;
      const Scalar a = r[2 * i], b = r[2 * i + 1];
      r[2 * i] = a * c - b * s;
      r[2 * i + 1] = a * s + b * c;
    }
  }
}

Scalar silu(Scalar v) { return v / (1 + std::exp(-v)); }

}  // namespace

InferenceSession::InferenceSession(const Transformer& model) : model_(model) {
  reset();
}

void InferenceSession::reset() {
  pos_ = 0;
  k_cache_.assign(model_.layers.size(), {});
  v_cache_.assign(model_.layers.size(), {});
}

std::vector<Scalar> InferenceSession::attention(std::size_t layer,
                                                std::span<const Scalar> x) {
  const ModelConfig& cfg = model_.config();
  const LayerParams& p = model_.layers[layer];
  const std::size_t H = cfg.n_heads, KV = cfg.n_kv_heads, hd = cfg.head_dim();
  std::vector<Scalar> q = matvec(x, p.wq);
  std::vector<Scalar> k = matvec(x, p.wk);
  std::vector<Scalar> v = matvec(x, p.wv);
  if (cfg.use_qk_norm && !cfg.qk_norm_after_rope) {
    head_layer_norm(q, H, hd, p.q_norm, cfg.eps);
    head_layer_norm(k, KV, hd, p.k_norm, cfg.eps);
  }
  rotate(q, H, hd, pos_, cfg.rope_base);
  rotate(k, KV, hd, pos_, cfg.rope_base);
  if (cfg.use_qk_norm && cfg.qk_norm_after_rope) {
    head_layer_norm(q, H, hd, p.q_norm, cfg.eps);
    head_layer_norm(k, KV, hd, p.k_norm, cfg.eps);
  }
  auto& kc = k_cache_[layer];
  auto& vc = v_cache_[layer];
  kc.insert(kc.end(), k.begin(), k.end());
  vc.insert(vc.end(), v.begin(), v.end());
  const std::size_t n = pos_ + 1, ks = KV * hd, group = H / KV;
  const Scalar scale = 1 / std::sqrt(static_cast<Scalar>(hd));
  std::vector<Scalar> out(H * hd, Scalar{0}), pr(n);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t g = h / group;
    const Scalar* qh = q.data() + h * hd;
    Scalar mx = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar* kj = kc.data() + j * ks + g * hd;
      Scalar s = 0;
      for (std::size_t t = 0; t < hd; ++t) s += qh[t] * kj[t];
      pr[j] = s * scale;
      mx = j == 0 ? pr[j] : std::max(mx, pr[j]);
    }
    Scalar sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      pr[j] = std::exp(pr[j] - mx);
      sum += pr[j];
    }
    Scalar* oh = out.data() + h * hd;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar w = pr[j] / sum;
      const Scalar* vj = vc.data() + j * ks + g * hd;
      for (std::size_t t = 0; t < hd; ++t) oh[t] += w * vj[t];
    }
  }
  return matvec(out, p.wo);
}

std::vector<Scalar> InferenceSession::block(std::size_t layer,
                                            std::span<const Scalar> x) {
  const ModelConfig& cfg = model_.config();
  const LayerParams& p = model_.layers[layer];
  auto ffn = [&](std::span<const Scalar> in) {
    std::vector<Scalar> a = matvec(in, p.w1);
    const std::vector<Scalar> b = matvec(in, p.w3);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = silu(a[i]) * b[i];
    return matvec(a, p.w2);
  };
  std::vector<Scalar> h(x.begin(), x.end());
  if (cfg.norm_strategy == NormStrategy::PreNorm) {
    const auto a = attention(layer, rms(x, p.attn_norm, cfg.eps));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
    const auto f = ffn(rms(h, p.ffn_norm, cfg.eps));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += f[i];
  } else {
    const auto a = rms(attention(layer, x), p.attn_norm, cfg.eps);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
    const auto f = rms(ffn(h), p.ffn_norm, cfg.eps);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += f[i];
  }
  return h;
}

std::vector<Scalar> InferenceSession::feed(TokenId token) {
  const ModelConfig& cfg = model_.config();
  if (pos_ >= cfg.context_length) {
    throw ShapeError("inference position " + std::to_string(pos_) +
                     " exceeds context length " +
                     std::to_string(cfg.context_length));
  }
  const std::size_t d = cfg.d_model;
  if (token >= cfg.vocab_size()) {
    throw DataError("token id " + std::to_string(token) +
                    " out of range for vocabulary of " +
                    std::to_string(cfg.vocab_size()));
  }
  const auto emb = model_.tok_embeddings.data();
  std::vector<Scalar> x(emb.begin() + token * d, emb.begin() + (token + 1) * d);
  for (std::size_t l = 0; l < model_.layers.size(); ++l) x = block(l, x);
  ++pos_;
  const std::vector<Scalar> normed = rms(x, model_.final_norm, cfg.eps);
  if (!cfg.tie_embeddings) return matvec(normed, model_.output);
  std::vector<Scalar> logits(cfg.vocab_size(), Scalar{0});
  for (std::size_t v = 0; v < logits.size(); ++v) {
    for (std::size_t t = 0; t < d; ++t) logits[v] += normed[t] * emb[v * d + t];
  }
  return logits;
}

std::vector<Scalar> InferenceSession::prefill(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ShapeError("prefill needs at least one token");
  std::vector<Scalar> logits;
  for (TokenId t : tokens) logits = feed(t);
  return logits;
}

RandomLogitsScorer::RandomLogitsScorer(std::size_t vocab_size,
                                       std::uint64_t seed, double scale)
    : vocab_(vocab_size), seed_(seed), scale_(scale) {}

std::vector<Scalar> RandomLogitsScorer::feed(TokenId token) {
  history_ = splitmix64(history_ ^ (static_cast<std::uint64_t>(token) + 1));
  Rng rng(derive_seed(seed_, history_));
  std::vector<Scalar> logits(vocab_);
  for (auto& l : logits) l = static_cast<Scalar>(scale_ * rng.normal());
  return logits;
}

void RandomLogitsScorer::reset() { history_ = 0; }

}  // namespace chamtoy
