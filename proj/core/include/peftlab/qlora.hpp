#pragma once

// A linear layer whose base weight lives in quantized form while a low-rank
// adapter trains beside it. The base is dequantized transiently per kernel
// call, in the forward and again in the backward pass, so at most one
// layer's full-precision weight exists at any moment. The stored codes are
// plain bytes with no gradient path: only the adapter learns.

#include <memory>
#include <optional>

#include "peftlab/adapters.hpp"
#include "peftlab/quant.hpp"

namespace peftlab {

// Counters over transient dequantized views, for asserting the memory
// contract. A populated cache counts as one live view until cleared.
struct DequantStats {
  static std::size_t live();
  static std::size_t peak();
  static void reset();
};

struct QloraLinear {
  std::shared_ptr<const QuantizedTensor> w_q;
  LoraAdapter adapter;
  // Storage precision of dequantized views and the compute default.
  Precision compute = Precision::f32;
  // Optional speed/memory trade: keep the dequantized view alive between
  // calls instead of rebuilding it.
  bool cache_dequantized = false;
  std::shared_ptr<std::optional<Tensor>> cache;

  // Quantizes w (which must not be trainable), discards the full-precision
  // original, and attaches a fresh adapter of the given rank.
  static QloraLinear create(const Tensor& w, const QuantScheme& scheme, const Granularity& gran,
                            std::size_t rank, Rng& rng,
                            std::optional<bool> double_quant = std::nullopt,
                            Precision compute = Precision::f32, bool cache = false,
                            double init_stddev = 0.02);

  std::size_t in_dim() const { return w_q->rows; }
  std::size_t out_dim() const { return w_q->cols; }
};

// y = x dequant(W_q) + (x A) B. Arithmetic is term-for-term identical to the
// unquantized adapter forward on a weight equal to dequant(W_q).
Tensor qlora_forward(const Tensor& x, const QloraLinear& layer);

// backward(loss), then verifies the layer's adapter actually received
// gradients (GradientError if the layer never entered the graph).
void qlora_backward(const Tensor& loss, const QloraLinear& layer);

// Drops a populated cache; the next forward dequantizes afresh.
void clear_cache(QloraLinear& layer);

}  // namespace peftlab
