#pragma once

// Reverse-mode autodiff over a fixed set of tensor operations, plus the SGD
// update. Ops record onto the innermost active Tape whenever any input is
// differentiable (a parameter, or itself produced by a recorded op). With no
// tape in scope every op is a pure function, which is what the finite
// difference oracles and the decoder rely on.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Scoped recording of the backward graph. Constructing a Tape makes it the
// active tape for the current thread until it is destroyed; tapes nest.
// backward() replays the recorded closures in reverse execution order exactly
// once and then consumes the tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t recorded() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  // loss must be 1x1 and produced by an op recorded on this tape. Seeds
  // d(loss)/d(loss) = 1 and propagates. A second call without a fresh
  // forward pass raises TapeError.
  void backward(const Tensor& loss);

  static Tape* active();

  void record_entry(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Convenience wrapper over Tape::active()->backward(loss).
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor tanh_map(const Tensor& a);

// out[i][j] = a[i][j] * v[0][j]; v must be 1 x a.cols(). Used to apply a
// masked diagonal without materializing a square matrix.
Tensor col_scale(const Tensor& a, const Tensor& v);

// Frobenius norm squared, as a 1x1 tensor.
Tensor sum_squares(const Tensor& a);

// Gathers table rows by token id; backward scatters gradients back into the
// table with accumulation for repeated ids.
Tensor embedding_rows(const Tensor& table, const TokenIds& ids);

// Mean token-level negative log likelihood over rows of logits. targets[i]
// is the class index for row i. Numerically stabilized; returns 1x1.
Tensor cross_entropy(const Tensor& logits, const TokenIds& targets);

struct SgdConfig {
  double learning_rate = 1e-2;
  std::size_t steps = 500;

  // Zero learning rate is legal (the no-op update is well defined and useful
  // for identity checks); negative or non-finite is not.
  void validate() const;
};

// In-place p <- p - lr * grad for every parameter, elementwise in the
// parameter's storage precision. Every parameter must carry a populated
// gradient (GradientError otherwise). Gradients are cleared afterwards.
void sgd_step(std::span<Tensor> params, const SgdConfig& cfg);

namespace detail {

// Shared matmul kernels. Both the plain matmul op and the quantized-weight
// matmul route through these so the two paths are arithmetically identical
// term for term.
void matmul_values(const double* a, std::size_t rows, std::size_t inner, const double* b,
                   std::size_t cols, Precision out_prec, double* out);
void matmul_grad_a(const double* g, const double* b, std::size_t rows, std::size_t inner,
                   std::size_t cols, double* da);
void matmul_grad_b(const double* a, const double* g, std::size_t rows, std::size_t inner,
                   std::size_t cols, double* db);

bool tracked(const TensorNode* n);

// Gradient storage of a node, allocated as zeros on first use.
std::span<double> grad_sink(TensorNode* n);

// Marks out as tape-produced and records the closure, if recording applies.
void maybe_record(std::initializer_list<const TensorNode*> inputs, Tensor& out,
                  std::function<void()> fn);

}  // namespace detail

}  // namespace peftlab
