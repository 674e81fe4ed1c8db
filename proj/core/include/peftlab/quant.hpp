#pragma once

// Post-training quantization: asymmetric and symmetric affine at 8 or 4 bits,
// plus a 16-value normal-quantile codebook ("nf4"). Rounding is always
// round-to-nearest-even. Constants can be fitted per tensor, per row, or per
// contiguous 1-D block of the flattened tensor. Per-group scales can
// themselves be quantized (symmetric int8 over super-groups of 256 scales),
// which is the default for the codebook scheme.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

enum class QuantKind : std::uint8_t { asymmetric = 0, symmetric = 1, nf4 = 2 };

struct QuantScheme {
  QuantKind kind = QuantKind::symmetric;
  int bits = 8;

  static QuantScheme asymmetric_affine(int bits) { return {QuantKind::asymmetric, bits}; }
  static QuantScheme symmetric_affine(int bits) { return {QuantKind::symmetric, bits}; }
  static QuantScheme nf4_scheme() { return {QuantKind::nf4, 4}; }

  // Asymmetric uses the full two's-complement range. Symmetric drops the
  // most negative code so the range is balanced around zero.
  int qmin() const;
  int qmax() const;

  void validate() const;
  std::string name() const;
};

// Parses "int8", "int4", "sym-int8", "sym-int4", "nf4" (ConfigError otherwise).
QuantScheme parse_scheme(const std::string& name);

enum class GranularityKind : std::uint8_t { per_tensor = 0, per_row = 1, per_block = 2 };

struct Granularity {
  GranularityKind kind = GranularityKind::per_block;
  std::size_t block_size = 64;

  static Granularity per_tensor() { return {GranularityKind::per_tensor, 0}; }
  static Granularity per_row() { return {GranularityKind::per_row, 0}; }
  static Granularity per_block(std::size_t size = 64) { return {GranularityKind::per_block, size}; }

  void validate() const;
  std::string name() const;
};

Granularity parse_granularity(const std::string& name);

struct Nf4Codebook {
  std::array<double, 16> values;  // strictly increasing, values[0] = -1, values[15] = +1

  double max_half_gap() const;
  // Nearest value by absolute distance; exact ties go to the smaller
  // magnitude.
  int nearest(double t) const;
};

// Canonical codebook: 8 negative values, one exact zero, 7 positive values,
// derived from evenly spaced normal quantiles rescaled to unit endpoints.
const Nf4Codebook& nf4_codebook();

struct QuantConstants {
  double scale = 1.0;
  std::int32_t zero_point = 0;  // always 0 for symmetric and nf4
  // An all-zero group cannot define a scale; it is stored with scale 1,
  // zero point 0, and this flag set.
  bool degenerate = false;
};

// Fits constants for one group of values. The asymmetric range is extended
// to include zero so the zero point stays inside [qmin, qmax] and real zero
// is exactly representable.
QuantConstants fit_constants(std::span<const double> values, const QuantScheme& scheme);

// Second-level quantization of the per-group scales: symmetric int8 over
// super-groups of 256 scales. reconstruct() is exact when every scale in a
// super-group is equal.
struct ScaleChain {
  static constexpr std::size_t kSuperGroup = 256;

  std::vector<std::int8_t> codes;      // one per group
  std::vector<double> super_scales;    // one per super-group

  double reconstruct(std::size_t group) const {
    return super_scales[group / kSuperGroup] *
           (static_cast<double>(codes[group]) / 127.0);
  }
};

ScaleChain build_scale_chain(std::span<const QuantConstants> constants);

struct QuantizedTensor {
  QuantScheme scheme;
  Granularity granularity;
  std::size_t rows = 0;
  std::size_t cols = 0;
  // One code per element, in flat row-major order, kept unpacked in memory.
  // Serialization packs 4-bit codes two per byte.
  std::vector<std::int8_t> codes;
  // Per group. When a scale chain is present, .scale already holds the
  // reconstructed (second-level dequantized) value.
  std::vector<QuantConstants> constants;
  std::optional<ScaleChain> scale_chain;

  std::size_t elements() const { return rows * cols; }
  std::size_t group_count() const { return constants.size(); }
  std::size_t group_of(std::size_t flat) const;
  bool double_quantized() const { return scale_chain.has_value(); }
};

// Scale quantization defaults on for the codebook scheme, off for affine.
bool default_double_quant(QuantKind kind);

QuantizedTensor quantize(const Tensor& x, const QuantScheme& scheme, const Granularity& gran,
                         std::optional<bool> double_quant = std::nullopt);

// Exact reconstruction of one element, before output-precision rounding.
double dequantize_element(const QuantizedTensor& q, std::size_t flat);

// Rejects out-of-range codes with IntegrityError.
Tensor dequantize(const QuantizedTensor& q, Precision out = Precision::f64);

std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits);
std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                      int bits, bool sign_extend);

// Bit-exact binary stream ("PQT1"). Same tensor, same bytes, every platform.
std::vector<std::uint8_t> serialize(const QuantizedTensor& q);
QuantizedTensor deserialize_quantized(std::span<const std::uint8_t> bytes);

struct FootprintReport {
  std::size_t code_bytes = 0;
  std::size_t constant_bytes = 0;
  std::size_t codebook_bytes = 0;
  std::size_t metadata_bytes = 0;

  std::size_t total() const {
    return code_bytes + constant_bytes + codebook_bytes + metadata_bytes;
  }
};

// Component byte counts; total() equals the serialized stream length exactly.
FootprintReport footprint(const QuantizedTensor& q);

// Bytes a plain dense tensor occupies at the given element width.
inline std::size_t plain_footprint_bytes(std::size_t elements, std::size_t bytes_per_elem) {
  return elements * bytes_per_elem;
}

namespace detail {
// Round-to-nearest, ties to even.
double rne(double v);
}

}  // namespace peftlab
