#include "peftlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace peftlab {

namespace {

thread_local Tape* g_active_tape = nullptr;

using detail::grad_sink;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw TapeError("tape already consumed; run a fresh forward pass before backward");
  }
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + loss.shape_string());
  }
  if (loss.node()->tape_tag != this) {
    throw TapeError("backward: loss was not produced by an op recorded on this tape");
  }
  grad_sink(loss.node())[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  consumed_ = true;
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw TapeError("backward called with no active tape");
  t->backward(loss);
}

namespace detail {

bool tracked(const TensorNode* n) { return n->requires_grad || n->on_tape; }

std::span<double> grad_sink(TensorNode* n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
  return n->grad;
}

void maybe_record(std::initializer_list<const TensorNode*> inputs, Tensor& out,
                  std::function<void()> fn) {
  Tape* t = Tape::active();
  if (!t) return;
  bool any = false;
  for (const TensorNode* n : inputs) any = any || tracked(n);
  if (!any) return;
  out.node()->on_tape = true;
  out.node()->tape_tag = t;
  t->record_entry(std::move(fn));
}

void matmul_values(const double* a, std::size_t rows, std::size_t inner, const double* b,
                   std::size_t cols, Precision out_prec, double* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += a[i * inner + k] * b[k * cols + j];
      out[i * cols + j] = round_to(out_prec, acc);
    }
  }
}

void matmul_grad_a(const double* g, const double* b, std::size_t rows, std::size_t inner,
                   std::size_t cols, double* da) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += g[i * cols + j] * b[k * cols + j];
      da[i * inner + k] += acc;
    }
  }
}

void matmul_grad_b(const double* a, const double* g, std::size_t rows, std::size_t inner,
                   std::size_t cols, double* db) {
  for (std::size_t k = 0; k < inner; ++k) {
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rows; ++i) acc += a[i * inner + k] * g[i * cols + j];
      db[k * cols + j] += acc;
    }
  }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + a.shape_string() + " * " +
                         b.shape_string());
  }
  Precision prec = combine(a.precision(), b.precision());
  Tensor out(a.rows(), b.cols(), prec);
  detail::matmul_values(a.data().data(), a.rows(), a.cols(), b.data().data(), b.cols(), prec,
                        out.data_mut().data());
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get(), bn.get()}, out, [an, bn, on] {
    if (on->grad.empty()) return;
    std::size_t rows = an->rows, inner = an->cols, cols = bn->cols;
    if (detail::tracked(an.get())) {
      detail::matmul_grad_a(on->grad.data(), bn->data.data(), rows, inner, cols,
                            grad_sink(an.get()).data());
    }
    if (detail::tracked(bn.get())) {
      detail::matmul_grad_b(an->data.data(), on->grad.data(), rows, inner, cols,
                            grad_sink(bn.get()).data());
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Precision prec = combine(a.precision(), b.precision());
  Tensor out(a.rows(), a.cols(), prec);
  for (std::size_t k = 0; k < a.size(); ++k) {
    out.data_mut()[k] = round_to(prec, a.data()[k] + b.data()[k]);
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get(), bn.get()}, out, [an, bn, on] {
    if (on->grad.empty()) return;
    if (detail::tracked(an.get())) {
      auto da = grad_sink(an.get());
      for (std::size_t k = 0; k < da.size(); ++k) da[k] += on->grad[k];
    }
    if (detail::tracked(bn.get())) {
      auto db = grad_sink(bn.get());
      for (std::size_t k = 0; k < db.size(); ++k) db[k] += on->grad[k];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.rows(), a.cols(), a.precision());
  for (std::size_t k = 0; k < a.size(); ++k) {
    out.data_mut()[k] = round_to(a.precision(), a.data()[k] * c);
  }
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get()}, out, [an, on, c] {
    if (on->grad.empty()) return;
    if (!detail::tracked(an.get())) return;
    auto da = grad_sink(an.get());
    for (std::size_t k = 0; k < da.size(); ++k) da[k] += c * on->grad[k];
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows(), a.precision());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out.data_mut()[j * a.rows() + i] = a.data()[i * a.cols() + j];
    }
  }
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get()}, out, [an, on] {
    if (on->grad.empty()) return;
    if (!detail::tracked(an.get())) return;
    auto da = grad_sink(an.get());
    std::size_t rows = an->rows, cols = an->cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += on->grad[j * rows + i];
    }
  });
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  if (a.cols() == 0) throw DimensionError("softmax_rows: tensor has zero columns");
  Tensor out(a.rows(), a.cols(), a.precision());
  std::size_t cols = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* row = a.data().data() + i * cols;
    double* orow = out.data_mut().data() + i * cols;
    double m = row[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      orow[j] = std::exp(row[j] - m);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < cols; ++j) orow[j] = round_to(a.precision(), orow[j] / sum);
  }
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get()}, out, [an, on] {
    if (on->grad.empty()) return;
    if (!detail::tracked(an.get())) return;
    auto da = grad_sink(an.get());
    std::size_t cols = an->cols;
    for (std::size_t i = 0; i < an->rows; ++i) {
      const double* y = on->data.data() + i * cols;
      const double* g = on->grad.data() + i * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor tanh_map(const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.precision());
  for (std::size_t k = 0; k < a.size(); ++k) {
    out.data_mut()[k] = round_to(a.precision(), std::tanh(a.data()[k]));
  }
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get()}, out, [an, on] {
    if (on->grad.empty()) return;
    if (!detail::tracked(an.get())) return;
    auto da = grad_sink(an.get());
    for (std::size_t k = 0; k < da.size(); ++k) {
      double y = on->data[k];
      da[k] += (1.0 - y * y) * on->grad[k];
    }
  });
  return out;
}

Tensor col_scale(const Tensor& a, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw DimensionError("col_scale: scaler must be 1x" + std::to_string(a.cols()) + ", got " +
                         v.shape_string());
  }
  Precision prec = combine(a.precision(), v.precision());
  Tensor out(a.rows(), a.cols(), prec);
  std::size_t cols = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out.data_mut()[i * cols + j] = round_to(prec, a.data()[i * cols + j] * v.data()[j]);
    }
  }
  auto an = a.node_ptr();
  auto vn = v.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get(), vn.get()}, out, [an, vn, on] {
    if (on->grad.empty()) return;
    std::size_t rows = an->rows, cols = an->cols;
    if (detail::tracked(an.get())) {
      auto da = grad_sink(an.get());
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          da[i * cols + j] += on->grad[i * cols + j] * vn->data[j];
        }
      }
    }
    if (detail::tracked(vn.get())) {
      auto dv = grad_sink(vn.get());
      for (std::size_t j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          acc += on->grad[i * cols + j] * an->data[i * cols + j];
        }
        dv[j] += acc;
      }
    }
  });
  return out;
}

Tensor sum_squares(const Tensor& a) {
  Tensor out(1, 1, a.precision());
  double acc = 0.0;
  for (double x : a.data()) acc += x * x;
  out.data_mut()[0] = round_to(a.precision(), acc);
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({an.get()}, out, [an, on] {
    if (on->grad.empty()) return;
    if (!detail::tracked(an.get())) return;
    double g = on->grad[0];
    auto da = grad_sink(an.get());
    for (std::size_t k = 0; k < da.size(); ++k) da[k] += 2.0 * an->data[k] * g;
  });
  return out;
}

Tensor embedding_rows(const Tensor& table, const TokenIds& ids) {
  std::size_t cols = table.cols();
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw IndexError("embedding_rows: token id " + std::to_string(id) +
                       " outside table with " + std::to_string(table.rows()) + " rows");
    }
  }
  Tensor out(ids.size(), cols, table.precision());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.data().data() + static_cast<std::size_t>(ids[i]) * cols;
    std::copy(src, src + cols, out.data_mut().data() + i * cols);
  }
  auto tn = table.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({tn.get()}, out, [tn, on, ids] {
    if (on->grad.empty()) return;
    if (!detail::tracked(tn.get())) return;
    auto dt = grad_sink(tn.get());
    std::size_t cols = tn->cols;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = dt.data() + static_cast<std::size_t>(ids[i]) * cols;
      const double* g = on->grad.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const TokenIds& targets) {
  std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
  }
  if (rows == 0 || cols == 0) throw DimensionError("cross_entropy: empty logits");
  for (TokenId t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocab of " +
                       std::to_string(cols));
    }
  }
  // Probabilities are computed once here and captured for the backward pass,
  // so forward loss and backward gradient see identical numbers.
  std::vector<double> probs(rows * cols);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = logits.data().data() + i * cols;
    double m = row[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      probs[i * cols + j] = std::exp(row[j] - m);
      sum += probs[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) probs[i * cols + j] /= sum;
    total += (m + std::log(sum)) - row[static_cast<std::size_t>(targets[i])];
  }
  Tensor out(1, 1, logits.precision());
  out.data_mut()[0] = round_to(logits.precision(), total / static_cast<double>(rows));
  auto ln = logits.node_ptr();
  auto on = out.node_ptr();
  detail::maybe_record({ln.get()}, out, [ln, on, targets, probs = std::move(probs)] {
    if (on->grad.empty()) return;
    if (!detail::tracked(ln.get())) return;
    double g = on->grad[0] / static_cast<double>(ln->rows);
    auto dl = grad_sink(ln.get());
    std::size_t cols = ln->cols;
    for (std::size_t i = 0; i < ln->rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        double indicator = (static_cast<std::size_t>(targets[i]) == j) ? 1.0 : 0.0;
        dl[i * cols + j] += g * (probs[i * cols + j] - indicator);
      }
    }
  });
  return out;
}

void SgdConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw ConfigError("sgd: learning rate must be finite and non-negative, got " +
                      std::to_string(learning_rate));
  }
  if (steps == 0) throw ConfigError("sgd: step count must be positive");
}

void sgd_step(std::span<Tensor> params, const SgdConfig& cfg) {
  cfg.validate();
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].has_grad()) {
      throw GradientError("sgd_step: parameter " + std::to_string(p) +
                          " has no populated gradient");
    }
  }
  for (Tensor& param : params) {
    auto* n = param.node();
    for (std::size_t k = 0; k < n->data.size(); ++k) {
      n->data[k] = round_to(n->prec, n->data[k] - cfg.learning_rate * n->grad[k]);
    }
    param.clear_grad();
  }
}

}  // namespace peftlab
