#include <algorithm>
#include <cmath>

#include "chamtoy/kernels.hpp"

namespace chamtoy::kernels::serial {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> b,
             std::span<Scalar> c, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + m * n, Scalar{0});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar aip = a[i * k + p];
      const Scalar* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> g,
             std::span<Scalar> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* grow = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar aip = a[i * k + p];
      Scalar* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * grow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> g, std::span<const Scalar> b,
             std::span<Scalar> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* grow = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar* brow = b.data() + p * n;
      Scalar s = 0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

void softmax_rows(std::size_t rows, std::size_t cols,
                  std::span<const Scalar> in, std::span<Scalar> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* x = in.data() + r * cols;
    Scalar* y = out.data() + r * cols;
    Scalar mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    Scalar sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
  }
}

void attention_forward(const AttentionDims& d, std::span<const Scalar> q,
                       std::span<const Scalar> k, std::span<const Scalar> v,
                       std::span<Scalar> probs, std::span<Scalar> out) {
  const std::size_t group = d.n_heads / d.n_kv_heads;
  const std::size_t qs = d.n_heads * d.head_dim;
  const std::size_t ks = d.n_kv_heads * d.head_dim;
  for (std::size_t h = 0; h < d.n_heads; ++h) {
    const std::size_t g = h / group;
    for (std::size_t i = 0; i < d.seq; ++i) {
      Scalar* p = probs.data() + (h * d.seq + i) * d.seq;
      const Scalar* qi = q.data() + i * qs + h * d.head_dim;
      Scalar mx = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const Scalar* kj = k.data() + j * ks + g * d.head_dim;
        Scalar s = 0;
        for (std::size_t t = 0; t < d.head_dim; ++t) s += qi[t] * kj[t];
        p[j] = s * d.scale;
        mx = j == 0 ? p[j] : std::max(mx, p[j]);
      }
      Scalar sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[j] /= sum;
      for (std::size_t j = i + 1; j < d.seq; ++j) p[j] = 0;
      Scalar* oi = out.data() + i * qs + h * d.head_dim;
      std::fill(oi, oi + d.head_dim, Scalar{0});
      for (std::size_t j = 0; j <= i; ++j) {
        const Scalar* vj = v.data() + j * ks + g * d.head_dim;
        for (std::size_t t = 0; t < d.head_dim; ++t) oi[t] += p[j] * vj[t];
      }
    }
  }
}

void attention_backward(const AttentionDims& d, std::span<const Scalar> q,
                        std::span<const Scalar> k, std::span<const Scalar> v,
                        std::span<const Scalar> probs,
                        std::span<const Scalar> dout, std::span<Scalar> dq,
                        std::span<Scalar> dk, std::span<Scalar> dv) {
  const std::size_t group = d.n_heads / d.n_kv_heads;
  const std::size_t qs = d.n_heads * d.head_dim;
  const std::size_t ks = d.n_kv_heads * d.head_dim;
  std::vector<Scalar> ds(d.seq);
  for (std::size_t h = 0; h < d.n_heads; ++h) {
    const std::size_t g = h / group;
    for (std::size_t i = 0; i < d.seq; ++i) {
      const Scalar* p = probs.data() + (h * d.seq + i) * d.seq;
      const Scalar* doi = dout.data() + i * qs + h * d.head_dim;
      const Scalar* qi = q.data() + i * qs + h * d.head_dim;
      Scalar dot = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const Scalar* vj = v.data() + j * ks + g * d.head_dim;
        Scalar* dvj = dv.data() + j * ks + g * d.head_dim;
        Scalar s = 0;
        for (std::size_t t = 0; t < d.head_dim; ++t) {
          s += doi[t] * vj[t];
          dvj[t] += p[j] * doi[t];
        }
        ds[j] = s;
        dot += s * p[j];
      }
      Scalar* dqi = dq.data() + i * qs + h * d.head_dim;
      for (std::size_t j = 0; j <= i; ++j) {
        const Scalar dsj = p[j] * (ds[j] - dot) * d.scale;
        const Scalar* kj = k.data() + j * ks + g * d.head_dim;
        Scalar* dkj = dk.data() + j * ks + g * d.head_dim;
        for (std::size_t t = 0; t < d.head_dim; ++t) {
          dqi[t] += dsj * kj[t];
          dkj[t] += dsj * qi[t];
        }
      }
    }
  }
}

}  // namespace chamtoy::kernels::serial
