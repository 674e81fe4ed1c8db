#include "peftlab/qlora.hpp"

#include "peftlab/rng.hpp"

namespace peftlab {

namespace {

thread_local std::size_t g_live = 0;
thread_local std::size_t g_peak = 0;

struct DequantGuard {
  DequantGuard() {
    ++g_live;
    g_peak = std::max(g_peak, g_live);
  }
  ~DequantGuard() { --g_live; }
  DequantGuard(const DequantGuard&) = delete;
  DequantGuard& operator=(const DequantGuard&) = delete;
};

// The quantized-base matmul. Forward dequantizes a transient view; backward
// re-dequantizes instead of capturing the view, so no full-precision weight
// outlives the kernel call. No gradient is ever formed for the base: the
// closure only propagates into x.
Tensor matmul_dequant(const Tensor& x, const QloraLinear& layer) {
  const QuantizedTensor& wq = *layer.w_q;
  if (x.cols() != wq.rows) {
    throw DimensionError("qlora forward: inner dimensions disagree, " + x.shape_string() +
                         " * " + std::to_string(wq.rows) + "x" + std::to_string(wq.cols));
  }
  Precision prec = combine(x.precision(), layer.compute);
  Tensor out(x.rows(), wq.cols, prec);

  if (layer.cache_dequantized && layer.cache) {
    if (!layer.cache->has_value()) {
      *layer.cache = dequantize(wq, layer.compute);
      // The cached view stays live until clear_cache drops it.
      ++g_live;
      g_peak = std::max(g_peak, g_live);
    }
    const Tensor& w = **layer.cache;
    detail::matmul_values(x.data().data(), x.rows(), x.cols(), w.data().data(), wq.cols, prec,
                          out.data_mut().data());
  } else {
    DequantGuard guard;
    Tensor w = dequantize(wq, layer.compute);
    detail::matmul_values(x.data().data(), x.rows(), x.cols(), w.data().data(), wq.cols, prec,
                          out.data_mut().data());
  }

  auto xn = x.node_ptr();
  auto on = out.node_ptr();
  auto wq_ptr = layer.w_q;
  auto cache = layer.cache_dequantized ? layer.cache : nullptr;
  Precision compute = layer.compute;
  detail::maybe_record({xn.get()}, out, [xn, on, wq_ptr, cache, compute] {
    if (on->grad.empty()) return;
    if (!detail::tracked(xn.get())) return;
    if (cache && cache->has_value()) {
      detail::matmul_grad_a(on->grad.data(), (*cache)->data().data(), xn->rows, xn->cols,
                            wq_ptr->cols, detail::grad_sink(xn.get()).data());
      return;
    }
    DequantGuard guard;
    Tensor w = dequantize(*wq_ptr, compute);
    detail::matmul_grad_a(on->grad.data(), w.data().data(), xn->rows, xn->cols, wq_ptr->cols,
                          detail::grad_sink(xn.get()).data());
  });
  return out;
}

}  // namespace

std::size_t DequantStats::live() { return g_live; }
std::size_t DequantStats::peak() { return g_peak; }
void DequantStats::reset() { g_peak = g_live; }

QloraLinear QloraLinear::create(const Tensor& w, const QuantScheme& scheme,
                                const Granularity& gran, std::size_t rank, Rng& rng,
                                std::optional<bool> double_quant, Precision compute, bool cache,
                                double init_stddev) {
  if (w.requires_grad()) {
    throw UsageError("qlora: refusing to quantize a trainable tensor; freeze it first");
  }
  QloraLinear layer;
  layer.w_q = std::make_shared<const QuantizedTensor>(quantize(w, scheme, gran, double_quant));
  layer.compute = compute;
  layer.cache_dequantized = cache;
  if (cache) layer.cache = std::make_shared<std::optional<Tensor>>();
  // The adapter trains at compute precision regardless of how the original
  // weight was stored.
  Tensor proxy = Tensor::zeros(w.rows(), w.cols(), compute);
  layer.adapter = LoraAdapter::create(proxy, rank, rng, init_stddev);
  layer.adapter.base_id = layer.w_q.get();
  return layer;
}

Tensor qlora_forward(const Tensor& x, const QloraLinear& layer) {
  if (layer.adapter.base_id != layer.w_q.get()) {
    throw UsageError("qlora_forward: adapter does not belong to this quantized base");
  }
  Tensor dense = matmul_dequant(x, layer);
  Tensor update = matmul(matmul(x, layer.adapter.a), layer.adapter.b);
  return add(dense, update);
}

void qlora_backward(const Tensor& loss, const QloraLinear& layer) {
  backward(loss);
  if (!layer.adapter.a.has_grad() || !layer.adapter.b.has_grad()) {
    throw GradientError("qlora_backward: the layer's adapter received no gradient");
  }
}

void clear_cache(QloraLinear& layer) {
  if (layer.cache && layer.cache->has_value()) {
    layer.cache->reset();
    --g_live;
  }
}

}  // namespace peftlab
