#include <benchmark/benchmark.h>

#include "peftlab/ops.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/tensor.hpp"

namespace {

using namespace peftlab;

Tensor random_square(std::size_t n, Rng& rng, Precision prec) {
  Tensor t(n, n, prec);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) t.set(i, j, 2.0 * rng.uniform() - 1.0);
  }
  return t;
}

void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = random_square(n, rng, Precision::f64);
  Tensor b = random_square(n, rng, Precision::f64);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_matmul_f32(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = random_square(n, rng, Precision::f32);
  Tensor b = random_square(n, rng, Precision::f32);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
}
BENCHMARK(BM_matmul_f32)->Arg(64);

void BM_matmul_backward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor a = random_square(n, rng, Precision::f64);
  Tensor b = random_square(n, rng, Precision::f64);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    Tensor loss = sum_squares(matmul(a, b));
    tape.backward(loss);
    benchmark::DoNotOptimize(a.grad().data());
  }
}
BENCHMARK(BM_matmul_backward)->Arg(16)->Arg(64);

void BM_softmax_rows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  Tensor a = random_square(n, rng, Precision::f64);
  for (auto _ : state) {
    Tensor s = softmax_rows(a);
    benchmark::DoNotOptimize(s.data().data());
  }
}
BENCHMARK(BM_softmax_rows)->Arg(64)->Arg(256);

void BM_attention_block(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  Tensor x = random_square(n, rng, Precision::f64);
  Tensor wq = random_square(n, rng, Precision::f64);
  Tensor wk = random_square(n, rng, Precision::f64);
  Tensor wv = random_square(n, rng, Precision::f64);
  const double inv = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto _ : state) {
    Tensor q = matmul(x, wq);
    Tensor k = matmul(x, wk);
    Tensor v = matmul(x, wv);
    Tensor out = matmul(softmax_rows(scale(matmul(q, transpose(k)), inv)), v);
    benchmark::DoNotOptimize(out.data().data());
  }
}
BENCHMARK(BM_attention_block)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
