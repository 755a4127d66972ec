#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace chamtoy::testing {

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

GradCheck grad_check(const std::vector<Tensor>& leaves,
                     const std::function<Tensor()>& loss, double step,
                     double zero_floor) {
  for (auto leaf : leaves) leaf.zero_grad();
  loss().backward();
  GradCheck out;
  for (auto leaf : leaves) {
    std::vector<double> analytic(leaf.numel(), 0.0), numeric(leaf.numel());
    if (leaf.has_grad()) {
      const auto g = leaf.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto data = leaf.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Scalar keep = data[i];
      data[i] = keep + step;
      const double up = loss().item();
      data[i] = keep - step;
      const double down = loss().item();
      data[i] = keep;
      numeric[i] = (up - down) / (2 * step);
    }
    std::vector<double> diff(analytic.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double scale = std::max(norm2(analytic), norm2(numeric));
    const double err = norm2(diff);
    const double rel = scale < zero_floor ? (err < zero_floor ? 0.0 : 1.0) : err / scale;
    out.max_rel_error = std::max(out.max_rel_error, rel);
    out.entries += data.size();
  }
  return out;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool rg) {
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(rng.uniform(lo, hi));
  return Tensor::from_data(std::move(shape), std::move(v), rg);
}

// ---------------------------------------------------------------------------
// Reference forward pass. Row-major plain arrays; weights are [in, out].

namespace {

using Mat = std::vector<double>;

Mat to_vec(const Tensor& t) { return Mat(t.data().begin(), t.data().end()); }

// y[r, :] = x[r, :] W, W:[in, out]
Mat mm(const Mat& x, std::size_t rows, std::size_t in, const Mat& w, std::size_t out) {
  Mat y(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = 0;
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

Mat rmsnorm_rows(const Mat& x, std::size_t rows, std::size_t d, const Mat& g, double eps) {
  Mat y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0;
    for (std::size_t i = 0; i < d; ++i) ms += x[r * d + i] * x[r * d + i];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t i = 0; i < d; ++i) y[r * d + i] = x[r * d + i] * inv * g[i];
  }
  return y;
}

// Layer norm of each head vector; gains [heads, hd].
void layernorm_heads(Mat& x, std::size_t seq, std::size_t heads, std::size_t hd,
                     const Mat& g, double eps) {
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      double* v = &x[(s * heads + h) * hd];
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < hd; ++i) mu += v[i];
      mu /= static_cast<double>(hd);
      for (std::size_t i = 0; i < hd; ++i) var += (v[i] - mu) * (v[i] - mu);
      var = var / static_cast<double>(hd) + eps;
      const double inv = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
      for (std::size_t i = 0; i < hd; ++i) v[i] = (v[i] - mu) * inv * g[h * hd + i];
    }
}

void rope_heads(Mat& x, std::size_t seq, std::size_t heads, std::size_t hd, double base) {
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const double a = static_cast<double>(s) * theta;
        double& x0 = x[(s * heads + h) * hd + 2 * i];
        double& x1 = x[(s * heads + h) * hd + 2 * i + 1];
        const double r0 = x0 * std::cos(a) - x1 * std::sin(a);
        const double r1 = x0 * std::sin(a) + x1 * std::cos(a);
        x0 = r0;
        x1 = r1;
      }
}

Mat attention_ref(const Mat& xin, std::size_t seq, const LayerParams& p,
                  const ModelConfig& c) {
  const std::size_t d = c.d_model, H = c.n_heads, KV = c.n_kv_heads, hd = c.head_dim();
  Mat q = mm(xin, seq, d, to_vec(p.wq), H * hd);
  Mat k = mm(xin, seq, d, to_vec(p.wk), KV * hd);
  Mat v = mm(xin, seq, d, to_vec(p.wv), KV * hd);
  if (c.use_qk_norm && !c.qk_norm_after_rope) {
    layernorm_heads(q, seq, H, hd, to_vec(p.q_norm), c.eps);
    layernorm_heads(k, seq, KV, hd, to_vec(p.k_norm), c.eps);
  }
  rope_heads(q, seq, H, hd, c.rope_base);
  rope_heads(k, seq, KV, hd, c.rope_base);
  if (c.use_qk_norm && c.qk_norm_after_rope) {
    layernorm_heads(q, seq, H, hd, to_vec(p.q_norm), c.eps);
    layernorm_heads(k, seq, KV, hd, to_vec(p.k_norm), c.eps);
  }
  Mat ctx(seq * H * hd, 0.0);
  const std::size_t group = H / KV;
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t kh = h / group;
    for (std::size_t i = 0; i < seq; ++i) {
      std::vector<double> sc(i + 1);
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < hd; ++t)
          dot += q[(i * H + h) * hd + t] * k[(j * KV + kh) * hd + t];
        sc[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, sc[j]);
      }
      double z = 0;
      for (auto& s : sc) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t t = 0; t < hd; ++t)
          ctx[(i * H + h) * hd + t] += sc[j] / z * v[(j * KV + kh) * hd + t];
    }
  }
  return mm(ctx, seq, H * hd, to_vec(p.wo), d);
}

Mat ffn_ref(const Mat& xin, std::size_t seq, const LayerParams& p, const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  Mat a = mm(xin, seq, d, to_vec(p.w1), f);
  const Mat b = mm(xin, seq, d, to_vec(p.w3), f);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = a[i] / (1 + std::exp(-a[i])) * b[i];
  return mm(a, seq, f, to_vec(p.w2), d);
}

}  // namespace

std::vector<double> reference_logits(const Transformer& model,
                                     const std::vector<TokenId>& tokens) {
  const ModelConfig& c = model.config();
  const std::size_t seq = tokens.size(), d = c.d_model, V = c.vocab_size();
  const Mat emb = to_vec(model.tok_embeddings);
  Mat x(seq * d);
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t i = 0; i < d; ++i) x[s * d + i] = emb[tokens[s] * d + i];
  for (const auto& p : model.layers) {
    const Mat an = to_vec(p.attn_norm), fn = to_vec(p.ffn_norm);
    if (c.norm_strategy == NormStrategy::PreNorm) {
      const Mat a = attention_ref(rmsnorm_rows(x, seq, d, an, c.eps), seq, p, c);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];
      const Mat f = ffn_ref(rmsnorm_rows(x, seq, d, fn, c.eps), seq, p, c);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += f[i];
    } else {
      const Mat a = rmsnorm_rows(attention_ref(x, seq, p, c), seq, d, an, c.eps);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];
      const Mat f = rmsnorm_rows(ffn_ref(x, seq, p, c), seq, d, fn, c.eps);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += f[i];
    }
  }
  const Mat h = rmsnorm_rows(x, seq, d, to_vec(model.final_norm), c.eps);
  Mat head(d * V);
  if (c.tie_embeddings) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t v = 0; v < V; ++v) head[i * V + v] = emb[v * d + i];
  } else {
    head = to_vec(model.output);
  }
  return mm(h, seq, d, head, V);
}

// ---------------------------------------------------------------------------

TempDir::TempDir(const std::string& tag) {
  static std::random_device rd;
  path_ = std::filesystem::temp_directory_path() /
          ("chamtoy-" + tag + "-" + std::to_string(rd()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(CHAMTOY_FIXTURE_DIR) / name;
}

std::string random_utf8(Rng& rng, std::size_t max_chars) {
  std::string s;
  const std::size_t n = rng.below(max_chars + 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t cp;
    switch (rng.below(4)) {
      case 0: cp = static_cast<std::uint32_t>(rng.below(0x80)); break;
      case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.below(0x800 - 0x80)); break;
      case 2:
        do cp = 0x800 + static_cast<std::uint32_t>(rng.below(0x10000 - 0x800));
        while (cp >= 0xD800 && cp <= 0xDFFF);
        break;
      default: cp = 0x10000 + static_cast<std::uint32_t>(rng.below(0x110000 - 0x10000));
    }
    if (cp < 0x80) {
      s += static_cast<char>(cp);
    } else if (cp < 0x800) {
      s += static_cast<char>(0xC0 | (cp >> 6));
      s += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      s += static_cast<char>(0xE0 | (cp >> 12));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      s += static_cast<char>(0xF0 | (cp >> 18));
      s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      s += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }
  return s;
}

}  // namespace chamtoy::testing
