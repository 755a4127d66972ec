#ifndef CHAMTOY_KERNELS_HPP_
#define CHAMTOY_KERNELS_HPP_

#include <cstddef>
#include <span>

#include "chamtoy/common.hpp"

// Dense inner loops used by the tensor ops. Every kernel exists twice: a
// serial reference and an OpenMP version. The OpenMP versions partition work
// so that each output element is produced by exactly one thread with the same
// accumulation order as the serial loop, so both are bit-identical.
namespace chamtoy::kernels {

struct AttentionDims {
  std::size_t seq = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t head_dim = 0;
  Scalar scale = 1;
};

#define CHAMTOY_KERNEL_DECLS                                                  \
  /* c[m,n] (+)= a[m,k] * b[k,n] */                                           \
  void gemm_nn(std::size_t m, std::size_t k, std::size_t n,                   \
               std::span<const Scalar> a, std::span<const Scalar> b,          \
               std::span<Scalar> c, bool accumulate);                         \
  /* c[k,n] += a[m,k]^T * g[m,n] */                                           \
  void gemm_tn(std::size_t m, std::size_t k, std::size_t n,                   \
               std::span<const Scalar> a, std::span<const Scalar> g,          \
               std::span<Scalar> c);                                          \
  /* c[m,k] += g[m,n] * b[k,n]^T */                                           \
  void gemm_nt(std::size_t m, std::size_t k, std::size_t n,                   \
               std::span<const Scalar> g, std::span<const Scalar> b,          \
               std::span<Scalar> c);                                          \
  void softmax_rows(std::size_t rows, std::size_t cols,                       \
                    std::span<const Scalar> in, std::span<Scalar> out);       \
  /* q:[seq,H,hd] k,v:[seq,KV,hd] probs:[H,seq,seq] out:[seq,H,hd] */         \
  void attention_forward(const AttentionDims& dims, std::span<const Scalar> q, \
                         std::span<const Scalar> k, std::span<const Scalar> v, \
                         std::span<Scalar> probs, std::span<Scalar> out);     \
  /* accumulates into dq, dk, dv */                                           \
  void attention_backward(                                                    \
      const AttentionDims& dims, std::span<const Scalar> q,                   \
      std::span<const Scalar> k, std::span<const Scalar> v,                   \
      std::span<const Scalar> probs, std::span<const Scalar> dout,            \
      std::span<Scalar> dq, std::span<Scalar> dk, std::span<Scalar> dv);

namespace serial {
CHAMTOY_KERNEL_DECLS
}  // namespace serial

namespace omp {
CHAMTOY_KERNEL_DECLS
}  // namespace omp

#undef CHAMTOY_KERNEL_DECLS

// Dispatch used by the tensor library. Defaults to the OpenMP kernels.
void set_parallel(bool enabled);
bool parallel_enabled();

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> b,
             std::span<Scalar> c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> a, std::span<const Scalar> g,
             std::span<Scalar> c);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             std::span<const Scalar> g, std::span<const Scalar> b,
             std::span<Scalar> c);
void softmax_rows(std::size_t rows, std::size_t cols,
                  std::span<const Scalar> in, std::span<Scalar> out);
void attention_forward(const AttentionDims& dims, std::span<const Scalar> q,
                       std::span<const Scalar> k, std::span<const Scalar> v,
                       std::span<Scalar> probs, std::span<Scalar> out);
void attention_backward(const AttentionDims& dims, std::span<const Scalar> q,
                        std::span<const Scalar> k, std::span<const Scalar> v,
                        std::span<const Scalar> probs,
                        std::span<const Scalar> dout, std::span<Scalar> dq,
                        std::span<Scalar> dk, std::span<Scalar> dv);

}  // namespace chamtoy::kernels

#endif  // CHAMTOY_KERNELS_HPP_
