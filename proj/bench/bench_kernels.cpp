// Serial reference vs OpenMP kernels. Set OMP_NUM_THREADS to vary the team.
#include <benchmark/benchmark.h>

#include <vector>

#include "chamtoy/kernels.hpp"
#include "chamtoy/random.hpp"

namespace k = chamtoy::kernels;
using chamtoy::Scalar;

namespace {

std::vector<Scalar> random_vec(std::size_t n, std::uint64_t seed) {
  chamtoy::Rng rng(seed);
  std::vector<Scalar> v(n);
  for (auto& x : v) x = static_cast<Scalar>(rng.normal());
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<Scalar> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::omp::gemm_nn(n, n, n, a, b, c, false);
    else k::serial::gemm_nn(n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto cols = static_cast<std::size_t>(state.range(0));
  const std::size_t rows = 256;
  const auto in = random_vec(rows * cols, 3);
  std::vector<Scalar> out(rows * cols);
  for (auto _ : state) {
    if constexpr (Parallel) k::omp::softmax_rows(rows, cols, in, out);
    else k::serial::softmax_rows(rows, cols, in, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  k::AttentionDims d;
  d.seq = static_cast<std::size_t>(state.range(0));
  d.n_heads = 4;
  d.n_kv_heads = 2;
  d.head_dim = 16;
  d.scale = 0.25;
  const auto q = random_vec(d.seq * d.n_heads * d.head_dim, 4);
  const auto kk = random_vec(d.seq * d.n_kv_heads * d.head_dim, 5);
  const auto v = random_vec(d.seq * d.n_kv_heads * d.head_dim, 6);
  std::vector<Scalar> probs(d.n_heads * d.seq * d.seq), out(q.size());
  for (auto _ : state) {
    if constexpr (Parallel) k::omp::attention_forward(d, q, kk, v, probs, out);
    else k::serial::attention_forward(d, q, kk, v, probs, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_Gemm<true>)->Name("gemm/omp")->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial")->Arg(64)->Arg(512);
BENCHMARK(BM_Softmax<true>)->Name("softmax/omp")->Arg(64)->Arg(512);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->Arg(48)->Arg(128);
BENCHMARK(BM_Attention<true>)->Name("attention/omp")->Arg(48)->Arg(128);

BENCHMARK_MAIN();
