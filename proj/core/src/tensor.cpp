#include "peftlab/tensor.hpp"

#include "peftlab/rng.hpp"

namespace peftlab {

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         Precision prec) {
  std::size_t r = rows.size();
  std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Tensor t(r, c, prec);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw DimensionError("from_rows: ragged row " + std::to_string(i) + " has " +
                           std::to_string(row.size()) + " entries, expected " + std::to_string(c));
    }
    std::size_t j = 0;
    for (double v : row) t.set(i, j++, v);
    ++i;
  }
  return t;
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                         Precision prec) {
  if (data.size() != rows * cols) {
    throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  Tensor t(rows, cols, prec);
  for (std::size_t k = 0; k < data.size(); ++k) t.node()->data[k] = round_to(prec, data[k]);
  return t;
}

Tensor Tensor::random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                             Precision prec) {
  Tensor t(rows, cols, prec);
  for (auto& v : t.node()->data) v = round_to(prec, stddev * rng.normal());
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(rows(), cols(), precision());
  t.node()->data = node_->data;
  t.node()->requires_grad = node_->requires_grad;
  return t;
}

}  // namespace peftlab
