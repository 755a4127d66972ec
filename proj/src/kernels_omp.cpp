#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>

#include "chamtoy/kernels.hpp"

namespace chamtoy::kernels {

namespace omp {

namespace {
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 15;
}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> b,
             std::span<Scalar> c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    Scalar* crow = c.data() + i * n;
    if (!accumulate) std::fill(crow, crow + n, Scalar{0});
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
  // Parallel over output rows; each row still accumulates over i ascending.
  const auto out_rows = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (std::ptrdiff_t pp = 0; pp < out_rows; ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    Scalar* crow = c.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Scalar aip = a[i * k + p];
      const Scalar* grow = g.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * grow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> g, std::span<const Scalar> b,
             std::span<Scalar> c) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
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
  const auto nrows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kMinParallelWork)
  for (std::ptrdiff_t rr = 0; rr < nrows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
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
  const auto units = static_cast<std::ptrdiff_t>(d.n_heads * d.seq);
  const std::size_t work = d.n_heads * d.seq * d.seq * d.head_dim;
#pragma omp parallel for schedule(static) if (work >= kMinParallelWork)
  for (std::ptrdiff_t u = 0; u < units; ++u) {
    const std::size_t h = static_cast<std::size_t>(u) / d.seq;
    const std::size_t i = static_cast<std::size_t>(u) % d.seq;
    const std::size_t g = h / group;
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

void attention_backward(const AttentionDims& d, std::span<const Scalar> q,
                        std::span<const Scalar> k, std::span<const Scalar> v,
                        std::span<const Scalar> probs,
                        std::span<const Scalar> dout, std::span<Scalar> dq,
                        std::span<Scalar> dk, std::span<Scalar> dv) {
  // One thread per KV group: heads sharing a KV head write the same dk/dv
  // rows, so they stay on one thread in ascending head order.
  const std::size_t group = d.n_heads / d.n_kv_heads;
  const std::size_t qs = d.n_heads * d.head_dim;
  const std::size_t ks = d.n_kv_heads * d.head_dim;
  const auto groups = static_cast<std::ptrdiff_t>(d.n_kv_heads);
  const std::size_t work = d.n_heads * d.seq * d.seq * d.head_dim;
#pragma omp parallel if (work >= kMinParallelWork)
  {
    std::vector<Scalar> ds(d.seq);
#pragma omp for schedule(static)
    for (std::ptrdiff_t gg = 0; gg < groups; ++gg) {
      const auto g = static_cast<std::size_t>(gg);
      for (std::size_t h = g * group; h < (g + 1) * group; ++h) {
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
  }
}

}  // namespace omp

namespace {
std::atomic<bool> g_parallel{true};
}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> b,
             std::span<Scalar> c, bool accumulate) {
  if (parallel_enabled()) return omp::gemm_nn(m, k, n, a, b, c, accumulate);
  serial::gemm_nn(m, k, n, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> g,
             std::span<Scalar> c) {
  if (parallel_enabled()) return omp::gemm_tn(m, k, n, a, g, c);
  serial::gemm_tn(m, k, n, a, g, c);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> g, std::span<const Scalar> b,
             std::span<Scalar> c) {
  if (parallel_enabled()) return omp::gemm_nt(m, k, n, g, b, c);
  serial::gemm_nt(m, k, n, g, b, c);
}

void softmax_rows(std::size_t rows, std::size_t cols,
                  std::span<const Scalar> in, std::span<Scalar> out) {
  if (parallel_enabled()) return omp::softmax_rows(rows, cols, in, out);
  serial::softmax_rows(rows, cols, in, out);
}

void attention_forward(const AttentionDims& dims, std::span<const Scalar> q,
                       std::span<const Scalar> k, std::span<const Scalar> v,
                       std::span<Scalar> probs, std::span<Scalar> out) {
  if (parallel_enabled()) {
    return omp::attention_forward(dims, q, k, v, probs, out);
  }
  serial::attention_forward(dims, q, k, v, probs, out);
}

void attention_backward(const AttentionDims& dims, std::span<const Scalar> q,
                        std::span<const Scalar> k, std::span<const Scalar> v,
                        std::span<const Scalar> probs,
                        std::span<const Scalar> dout, std::span<Scalar> dq,
                        std::span<Scalar> dk, std::span<Scalar> dv) {
  if (parallel_enabled()) {
    return omp::attention_backward(dims, q, k, v, probs, dout, dq, dk, dv);
  }
  serial::attention_backward(dims, q, k, v, probs, dout, dq, dk, dv);
}

}  // namespace chamtoy::kernels
