#include <benchmark/benchmark.h>

#include "peftlab/quant.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/tensor.hpp"

namespace {

using namespace peftlab;

Tensor weight_matrix(std::size_t rows, std::size_t cols) {
  Rng rng(11);
  Tensor t(rows, cols, Precision::f64);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t.set(i, j, rng.normal() * 0.05);
  }
  return t;
}

void bytes_counter(benchmark::State& state, std::size_t elements) {
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(elements * sizeof(double)));
}

void BM_quantize_affine_int8_per_tensor(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  for (auto _ : state) {
    QuantizedTensor q = quantize(w, QuantScheme::asymmetric_affine(8), Granularity::per_tensor());
    benchmark::DoNotOptimize(q.codes.data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_quantize_affine_int8_per_tensor);

void BM_quantize_sym_int4_per_row(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  for (auto _ : state) {
    QuantizedTensor q = quantize(w, QuantScheme::symmetric_affine(4), Granularity::per_row());
    benchmark::DoNotOptimize(q.codes.data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_quantize_sym_int4_per_row);

void BM_quantize_nf4_per_block64(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  for (auto _ : state) {
    QuantizedTensor q = quantize(w, QuantScheme::nf4_scheme(), Granularity::per_block(64));
    benchmark::DoNotOptimize(q.codes.data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_quantize_nf4_per_block64);

void BM_quantize_nf4_double_quant(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  for (auto _ : state) {
    QuantizedTensor q = quantize(w, QuantScheme::nf4_scheme(), Granularity::per_block(64), true);
    benchmark::DoNotOptimize(q.codes.data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_quantize_nf4_double_quant);

void BM_dequantize_nf4_per_block64(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  QuantizedTensor q = quantize(w, QuantScheme::nf4_scheme(), Granularity::per_block(64));
  for (auto _ : state) {
    Tensor back = dequantize(q);
    benchmark::DoNotOptimize(back.data().data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_dequantize_nf4_per_block64);

void BM_dequantize_affine_int8_per_tensor(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  QuantizedTensor q = quantize(w, QuantScheme::asymmetric_affine(8), Granularity::per_tensor());
  for (auto _ : state) {
    Tensor back = dequantize(q);
    benchmark::DoNotOptimize(back.data().data());
  }
  bytes_counter(state, w.size());
}
BENCHMARK(BM_dequantize_affine_int8_per_tensor);

void BM_serialize_roundtrip(benchmark::State& state) {
  Tensor w = weight_matrix(256, 256);
  QuantizedTensor q = quantize(w, QuantScheme::nf4_scheme(), Granularity::per_block(64), true);
  for (auto _ : state) {
    std::vector<std::uint8_t> bytes = serialize(q);
    QuantizedTensor back = deserialize_quantized(bytes);
    benchmark::DoNotOptimize(back.codes.data());
  }
}
BENCHMARK(BM_serialize_roundtrip);

}  // namespace

BENCHMARK_MAIN();
