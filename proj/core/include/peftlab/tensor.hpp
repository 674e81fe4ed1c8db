#pragma once

// Dense row-major 2-D tensor with simulated storage precision and lazily
// allocated gradient storage. A Tensor is a cheap handle: copies share the
// underlying node, so the autodiff tape and parameter lists can alias the
// same storage. Use clone() for a deep copy.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

class Rng;

// f32 is a simulation: values still live in doubles, but every op output and
// every stored element is rounded through float first. Gradients are always
// held in full double precision.
enum class Precision : std::uint8_t { f64 = 0, f32 = 1 };

inline std::size_t bytes_per_element(Precision p) { return p == Precision::f64 ? 8 : 4; }

inline double round_to(Precision p, double v) {
  return p == Precision::f64 ? v : static_cast<double>(static_cast<float>(v));
}

inline Precision combine(Precision a, Precision b) {
  return (a == Precision::f32 || b == Precision::f32) ? Precision::f32 : Precision::f64;
}

inline const char* precision_name(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

namespace detail {

struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Precision prec = Precision::f64;
  bool requires_grad = false;
  // Set when a recorded op produced this node; gradients flow through such
  // nodes even though they are not parameters themselves.
  bool on_tape = false;
  // Identity of the tape whose op produced this node, for stale-tape checks.
  const void* tape_tag = nullptr;
  std::vector<double> data;
  // Empty means "no gradient populated". Allocated on first accumulation.
  std::vector<double> grad;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  Tensor(std::size_t rows, std::size_t cols, Precision prec = Precision::f64)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->rows = rows;
    node_->cols = cols;
    node_->prec = prec;
    node_->data.assign(rows * cols, 0.0);
  }

  static Tensor zeros(std::size_t rows, std::size_t cols, Precision prec = Precision::f64) {
    return Tensor(rows, cols, prec);
  }

  static Tensor full(std::size_t rows, std::size_t cols, double value,
                     Precision prec = Precision::f64) {
    Tensor t(rows, cols, prec);
    double v = round_to(prec, value);
    for (auto& x : t.node_->data) x = v;
    return t;
  }

  static Tensor identity(std::size_t n, Precision prec = Precision::f64) {
    Tensor t(n, n, prec);
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                          Precision prec = Precision::f64);

  static Tensor from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                          Precision prec = Precision::f64);

  // Entries drawn i.i.d. from N(0, stddev^2), row-major draw order.
  static Tensor random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                              Precision prec = Precision::f64);

  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->data.size(); }
  bool empty() const { return node_->data.empty(); }
  Precision precision() const { return node_->prec; }

  double at(std::size_t i, std::size_t j) const {
    check_index(i, j);
    return node_->data[i * node_->cols + j];
  }

  // Stored value is rounded to the tensor's precision, preserving the
  // invariant that f32 tensors only ever hold f32-representable values.
  void set(std::size_t i, std::size_t j, double v) {
    check_index(i, j);
    node_->data[i * node_->cols + j] = round_to(node_->prec, v);
  }

  std::span<const double> data() const { return node_->data; }

  // Raw mutable access. Callers writing through this are responsible for
  // keeping f32 tensors f32-rounded; prefer set().
  std::span<double> data_mut() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  std::span<const double> grad() const {
    if (node_->grad.empty()) throw GradientError("tensor has no populated gradient");
    return node_->grad;
  }

  double grad_at(std::size_t i, std::size_t j) const {
    check_index(i, j);
    return grad()[i * node_->cols + j];
  }

  // Allocates zeroed gradient storage if absent, then returns it.
  std::span<double> grad_mut() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }

  // Releases gradient storage entirely; has_grad() becomes false.
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  // Deep copy: fresh node with the same shape, precision, values, and
  // requires_grad flag. Gradient storage is not copied.
  Tensor clone() const;

  // Node identity. Two handles with equal id() share storage.
  const void* id() const { return node_.get(); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  std::string shape_string() const {
    return std::to_string(rows()) + "x" + std::to_string(cols());
  }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  void check_index(std::size_t i, std::size_t j) const {
    if (i >= node_->rows || j >= node_->cols) {
      throw IndexError("tensor index (" + std::to_string(i) + ", " + std::to_string(j) +
                       ") out of range for " + shape_string());
    }
  }

  std::shared_ptr<detail::TensorNode> node_;
};

}  // namespace peftlab
