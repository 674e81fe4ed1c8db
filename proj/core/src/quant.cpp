#include "peftlab/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "peftlab/bytes.hpp"

namespace peftlab {

namespace detail {

double rne(double v) {
  // nearbyint honors the prevailing rounding mode, which is to-nearest-even
  // unless someone has tampered with the FPU state; the library never does.
  return std::nearbyint(v);
}

}  // namespace detail

namespace {

constexpr char kMagic[4] = {'P', 'Q', 'T', '1'};

// Inverse standard normal CDF: Acklam's rational approximation followed by
// one Halley refinement against erfc. Good to ~1e-15 over (0, 1), which is
// far below the codebook's value gaps.
double probit(double p) {
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double lo = 0.02425, hi = 1.0 - 0.02425;
  double x;
  if (p < lo) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= hi) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  double err = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  double u = err * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

Nf4Codebook build_nf4_codebook() {
  Nf4Codebook cb{};
  constexpr double p0 = 1.0 / 32.0;
  // Eight evenly spaced probabilities climb from p0 toward 1/2 on the
  // negative side; seven climb from 1/2 to 1-p0 on the positive side. The
  // two anchors rescale each side so the endpoints land exactly on -1 and 1.
  double neg_anchor = -probit(p0);
  for (int i = 0; i < 8; ++i) {
    double p = p0 + static_cast<double>(i) * (0.5 - p0) / 8.0;
    cb.values[i] = probit(p) / neg_anchor;
  }
  cb.values[0] = -1.0;
  cb.values[8] = 0.0;
  double pos_anchor = probit(1.0 - p0);
  for (int j = 1; j <= 7; ++j) {
    double p = 0.5 + static_cast<double>(j) * (0.5 - p0) / 7.0;
    cb.values[8 + j] = probit(p) / pos_anchor;
  }
  cb.values[15] = 1.0;
  return cb;
}

}  // namespace

const Nf4Codebook& nf4_codebook() {
  static const Nf4Codebook cb = build_nf4_codebook();
  return cb;
}

double Nf4Codebook::max_half_gap() const {
  double widest = 0.0;
  for (int i = 0; i + 1 < 16; ++i) widest = std::max(widest, values[i + 1] - values[i]);
  return widest / 2.0;
}

int Nf4Codebook::nearest(double t) const {
  auto it = std::lower_bound(values.begin(), values.end(), t);
  if (it == values.begin()) return 0;
  if (it == values.end()) return 15;
  int hi = static_cast<int>(it - values.begin());
  int lo = hi - 1;
  double dlo = t - values[lo];
  double dhi = values[hi] - t;
  if (dlo < dhi) return lo;
  if (dhi < dlo) return hi;
  return std::fabs(values[lo]) <= std::fabs(values[hi]) ? lo : hi;
}

int QuantScheme::qmin() const {
  switch (kind) {
    case QuantKind::asymmetric:
      return -(1 << (bits - 1));
    case QuantKind::symmetric:
      return -((1 << (bits - 1)) - 1);
    case QuantKind::nf4:
      return 0;
  }
  return 0;
}

int QuantScheme::qmax() const {
  return kind == QuantKind::nf4 ? 15 : (1 << (bits - 1)) - 1;
}

void QuantScheme::validate() const {
  switch (kind) {
    case QuantKind::asymmetric:
    case QuantKind::symmetric:
      if (bits != 4 && bits != 8) {
        throw ConfigError("quant scheme: affine bit width must be 4 or 8, got " +
                          std::to_string(bits));
      }
      return;
    case QuantKind::nf4:
      if (bits != 4) throw ConfigError("quant scheme: codebook scheme is 4-bit only");
      return;
  }
  throw ConfigError("quant scheme: unknown kind");
}

std::string QuantScheme::name() const {
  switch (kind) {
    case QuantKind::asymmetric:
      return "int" + std::to_string(bits);
    case QuantKind::symmetric:
      return "sym-int" + std::to_string(bits);
    case QuantKind::nf4:
      return "nf4";
  }
  return "?";
}

QuantScheme parse_scheme(const std::string& name) {
  if (name == "int8") return QuantScheme::asymmetric_affine(8);
  if (name == "int4") return QuantScheme::asymmetric_affine(4);
  if (name == "sym-int8") return QuantScheme::symmetric_affine(8);
  if (name == "sym-int4") return QuantScheme::symmetric_affine(4);
  if (name == "nf4") return QuantScheme::nf4_scheme();
  throw ConfigError("unknown quant scheme '" + name +
                    "' (expected int8, int4, sym-int8, sym-int4, or nf4)");
}

void Granularity::validate() const {
  if (kind == GranularityKind::per_block && block_size == 0) {
    throw ConfigError("granularity: block size must be positive");
  }
}

std::string Granularity::name() const {
  switch (kind) {
    case GranularityKind::per_tensor:
      return "per-tensor";
    case GranularityKind::per_row:
      return "per-row";
    case GranularityKind::per_block:
      return "per-block[" + std::to_string(block_size) + "]";
  }
  return "?";
}

Granularity parse_granularity(const std::string& name) {
  if (name == "per-tensor") return Granularity::per_tensor();
  if (name == "per-row") return Granularity::per_row();
  if (name == "per-block") return Granularity::per_block();
  throw ConfigError("unknown granularity '" + name +
                    "' (expected per-tensor, per-row, or per-block)");
}

QuantConstants fit_constants(std::span<const double> values, const QuantScheme& scheme) {
  scheme.validate();
  if (values.empty()) throw UsageError("fit_constants: empty group");
  QuantConstants c;
  if (scheme.kind == QuantKind::asymmetric) {
    double rmin = 0.0, rmax = 0.0;  // zero-extended range
    for (double v : values) {
      rmin = std::min(rmin, v);
      rmax = std::max(rmax, v);
    }
    if (rmax == rmin) {
      c.degenerate = true;
      return c;
    }
    c.scale = (rmax - rmin) / static_cast<double>(scheme.qmax() - scheme.qmin());
    double z = detail::rne(static_cast<double>(scheme.qmin()) - rmin / c.scale);
    z = std::clamp(z, static_cast<double>(scheme.qmin()), static_cast<double>(scheme.qmax()));
    c.zero_point = static_cast<std::int32_t>(z);
  } else {
    double absmax = 0.0;
    for (double v : values) absmax = std::max(absmax, std::fabs(v));
    if (absmax == 0.0) {
      c.degenerate = true;
      return c;
    }
    c.scale = scheme.kind == QuantKind::nf4 ? absmax
                                            : absmax / static_cast<double>(scheme.qmax());
  }
  return c;
}

ScaleChain build_scale_chain(std::span<const QuantConstants> constants) {
  ScaleChain ch;
  std::size_t n = constants.size();
  ch.codes.resize(n);
  std::size_t supers = (n + ScaleChain::kSuperGroup - 1) / ScaleChain::kSuperGroup;
  ch.super_scales.resize(supers);
  for (std::size_t s = 0; s < supers; ++s) {
    std::size_t begin = s * ScaleChain::kSuperGroup;
    std::size_t end = std::min(n, begin + ScaleChain::kSuperGroup);
    double absmax = 0.0;
    for (std::size_t g = begin; g < end; ++g) {
      absmax = std::max(absmax, std::fabs(constants[g].scale));
    }
    if (absmax == 0.0) absmax = 1.0;  // fitted scales are positive; defensive
    ch.super_scales[s] = absmax;
    for (std::size_t g = begin; g < end; ++g) {
      // rne(127 * S / superS) with reconstruction superS * (code / 127):
      // this operand order reconstructs exactly when all scales are equal.
      double code = detail::rne(127.0 * (constants[g].scale / absmax));
      ch.codes[g] = static_cast<std::int8_t>(std::clamp(code, -127.0, 127.0));
    }
  }
  return ch;
}

std::size_t QuantizedTensor::group_of(std::size_t flat) const {
  switch (granularity.kind) {
    case GranularityKind::per_tensor:
      return 0;
    case GranularityKind::per_row:
      return flat / cols;
    case GranularityKind::per_block:
      return flat / granularity.block_size;
  }
  return 0;
}

bool default_double_quant(QuantKind kind) { return kind == QuantKind::nf4; }

namespace {

std::size_t expected_group_count(const Granularity& gran, std::size_t rows, std::size_t cols) {
  std::size_t n = rows * cols;
  if (n == 0) return 0;
  switch (gran.kind) {
    case GranularityKind::per_tensor:
      return 1;
    case GranularityKind::per_row:
      return rows;
    case GranularityKind::per_block:
      return (n + gran.block_size - 1) / gran.block_size;
  }
  return 0;
}

// [begin, end) of the flat index range covered by group g.
std::pair<std::size_t, std::size_t> group_range(const Granularity& gran, std::size_t rows,
                                                std::size_t cols, std::size_t g) {
  std::size_t n = rows * cols;
  switch (gran.kind) {
    case GranularityKind::per_tensor:
      return {0, n};
    case GranularityKind::per_row:
      return {g * cols, (g + 1) * cols};
    case GranularityKind::per_block:
      return {g * gran.block_size, std::min(n, (g + 1) * gran.block_size)};
  }
  return {0, 0};
}

}  // namespace

QuantizedTensor quantize(const Tensor& x, const QuantScheme& scheme, const Granularity& gran,
                         std::optional<bool> double_quant) {
  scheme.validate();
  gran.validate();
  if (gran.kind == GranularityKind::per_row && x.cols() == 0) {
    throw DimensionError("quantize: per-row granularity needs at least one column");
  }
  QuantizedTensor q;
  q.scheme = scheme;
  q.granularity = gran;
  q.rows = x.rows();
  q.cols = x.cols();
  q.codes.resize(x.size());

  std::size_t groups = expected_group_count(gran, q.rows, q.cols);
  q.constants.reserve(groups);
  const double* data = x.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    auto [begin, end] = group_range(gran, q.rows, q.cols, g);
    QuantConstants c = fit_constants(std::span<const double>(data + begin, end - begin), scheme);
    double qmin = scheme.qmin(), qmax = scheme.qmax();
    for (std::size_t k = begin; k < end; ++k) {
      std::int8_t code;
      if (scheme.kind == QuantKind::nf4) {
        code = c.degenerate
                   ? static_cast<std::int8_t>(8)  // the exact-zero entry
                   : static_cast<std::int8_t>(nf4_codebook().nearest(data[k] / c.scale));
      } else {
        double t = c.degenerate ? 0.0 : data[k] / c.scale + c.zero_point;
        code = static_cast<std::int8_t>(std::clamp(detail::rne(t), qmin, qmax));
        if (c.degenerate) code = static_cast<std::int8_t>(c.zero_point);
      }
      q.codes[k] = code;
    }
    q.constants.push_back(c);
  }

  bool dq = double_quant.value_or(default_double_quant(scheme.kind));
  if (dq && !q.constants.empty()) {
    q.scale_chain = build_scale_chain(q.constants);
    for (std::size_t g = 0; g < q.constants.size(); ++g) {
      q.constants[g].scale = q.scale_chain->reconstruct(g);
    }
  }
  return q;
}

double dequantize_element(const QuantizedTensor& q, std::size_t flat) {
  const QuantConstants& c = q.constants[q.group_of(flat)];
  std::int8_t code = q.codes[flat];
  if (q.scheme.kind == QuantKind::nf4) {
    return c.scale * nf4_codebook().values[static_cast<std::size_t>(code)];
  }
  return c.scale * (static_cast<double>(code) - static_cast<double>(c.zero_point));
}

Tensor dequantize(const QuantizedTensor& q, Precision out) {
  int qmin = q.scheme.qmin(), qmax = q.scheme.qmax();
  for (std::size_t k = 0; k < q.codes.size(); ++k) {
    int code = q.codes[k];
    if (code < qmin || code > qmax) {
      throw IntegrityError("dequantize: code " + std::to_string(code) + " at element " +
                           std::to_string(k) + " outside [" + std::to_string(qmin) + ", " +
                           std::to_string(qmax) + "] for scheme " + q.scheme.name());
    }
  }
  Tensor t(q.rows, q.cols, out);
  for (std::size_t k = 0; k < q.codes.size(); ++k) {
    t.data_mut()[k] = round_to(out, dequantize_element(q, k));
  }
  return t;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits) {
  if (bits == 8) {
    return std::vector<std::uint8_t>(reinterpret_cast<const std::uint8_t*>(codes.data()),
                                     reinterpret_cast<const std::uint8_t*>(codes.data()) +
                                         codes.size());
  }
  // Two codes per byte, earlier element in the low nibble, two's complement.
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t k = 0; k < codes.size(); ++k) {
    std::uint8_t nib = static_cast<std::uint8_t>(codes[k]) & 0x0f;
    out[k / 2] |= (k % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
  }
  return out;
}

std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                      int bits, bool sign_extend) {
  std::vector<std::int8_t> out(count);
  if (bits == 8) {
    if (packed.size() != count) {
      throw FormatError("packed code length disagrees with element count", 0);
    }
    std::copy(packed.begin(), packed.end(), reinterpret_cast<std::uint8_t*>(out.data()));
    return out;
  }
  if (packed.size() != (count + 1) / 2) {
    throw FormatError("packed code length disagrees with element count", 0);
  }
  for (std::size_t k = 0; k < count; ++k) {
    std::uint8_t nib = (k % 2 == 0) ? (packed[k / 2] & 0x0f)
                                    : static_cast<std::uint8_t>(packed[k / 2] >> 4);
    int v = nib;
    if (sign_extend && v >= 8) v -= 16;
    out[k] = static_cast<std::int8_t>(v);
  }
  return out;
}

std::vector<std::uint8_t> serialize(const QuantizedTensor& q) {
  ByteWriter w;
  w.str(std::string(kMagic, 4));
  w.u8(static_cast<std::uint8_t>(q.scheme.kind));
  w.u8(static_cast<std::uint8_t>(q.scheme.bits));
  w.u32(static_cast<std::uint32_t>(q.rows));
  w.u32(static_cast<std::uint32_t>(q.cols));
  w.u8(static_cast<std::uint8_t>(q.granularity.kind));
  w.u32(static_cast<std::uint32_t>(
      q.granularity.kind == GranularityKind::per_block ? q.granularity.block_size : 0));
  w.u32(static_cast<std::uint32_t>(q.group_count()));
  w.u8(q.double_quantized() ? 1 : 0);

  if (q.scheme.kind == QuantKind::nf4) {
    for (double v : nf4_codebook().values) w.f64(v);
  }
  if (q.double_quantized()) {
    const ScaleChain& ch = *q.scale_chain;
    w.u32(static_cast<std::uint32_t>(ch.super_scales.size()));
    for (double s : ch.super_scales) w.f64(s);
    for (std::int8_t c : ch.codes) w.i8(c);
  } else {
    for (const QuantConstants& c : q.constants) w.f64(c.scale);
  }
  if (q.scheme.kind == QuantKind::asymmetric) {
    for (const QuantConstants& c : q.constants) w.i8(static_cast<std::int8_t>(c.zero_point));
  }
  for (const QuantConstants& c : q.constants) w.u8(c.degenerate ? 1 : 0);

  auto packed = pack_codes(q.codes, q.scheme.bits);
  w.bytes(packed);
  return w.take();
}

QuantizedTensor deserialize_quantized(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::string magic = r.str(4, "magic");
  if (magic != std::string(kMagic, 4)) throw FormatError("bad magic, not a quantized stream", 0);

  QuantizedTensor q;
  std::uint8_t kind = r.u8();
  if (kind > 2) throw FormatError("unknown scheme kind " + std::to_string(kind), 4);
  q.scheme.kind = static_cast<QuantKind>(kind);
  q.scheme.bits = r.u8();
  try {
    q.scheme.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), 5);
  }
  q.rows = r.u32();
  q.cols = r.u32();
  std::uint8_t gkind = r.u8();
  if (gkind > 2) throw FormatError("unknown granularity kind " + std::to_string(gkind), 14);
  q.granularity.kind = static_cast<GranularityKind>(gkind);
  std::uint32_t bs = r.u32();
  q.granularity.block_size = bs;
  if (q.granularity.kind == GranularityKind::per_block && bs == 0) {
    throw FormatError("per-block stream with zero block size", 15);
  }
  std::uint32_t groups = r.u32();
  if (groups != expected_group_count(q.granularity, q.rows, q.cols)) {
    throw FormatError("group count disagrees with shape and granularity", 19);
  }
  std::uint8_t dq = r.u8();
  if (dq > 1) throw FormatError("bad double-quantization flag", 23);

  if (q.scheme.kind == QuantKind::nf4) {
    std::size_t at = r.offset();
    for (int i = 0; i < 16; ++i) {
      double v = r.f64();
      if (v != nf4_codebook().values[i]) {
        throw FormatError("embedded codebook does not match the canonical one", at + 8 * i);
      }
    }
  }

  q.constants.resize(groups);
  if (dq == 1) {
    ScaleChain ch;
    std::uint32_t supers = r.u32();
    std::size_t expect_supers =
        groups == 0 ? 0 : (groups + ScaleChain::kSuperGroup - 1) / ScaleChain::kSuperGroup;
    if (supers != expect_supers) {
      throw FormatError("super-group count disagrees with group count", r.offset() - 4);
    }
    ch.super_scales.resize(supers);
    for (auto& s : ch.super_scales) s = r.f64();
    ch.codes.resize(groups);
    for (auto& c : ch.codes) c = r.i8();
    q.scale_chain = std::move(ch);
    for (std::size_t g = 0; g < groups; ++g) q.constants[g].scale = q.scale_chain->reconstruct(g);
  } else {
    for (auto& c : q.constants) c.scale = r.f64();
  }
  if (q.scheme.kind == QuantKind::asymmetric) {
    for (auto& c : q.constants) c.zero_point = r.i8();
  }
  for (auto& c : q.constants) {
    std::uint8_t flag = r.u8();
    if (flag > 1) throw FormatError("bad degenerate-group flag", r.offset() - 1);
    c.degenerate = flag == 1;
  }

  std::size_t code_bytes = q.scheme.bits == 8 ? q.elements() : (q.elements() + 1) / 2;
  auto packed = r.bytes(code_bytes, "packed codes");
  if (!r.exhausted()) throw FormatError("trailing bytes after payload", r.offset());
  q.codes = unpack_codes(packed, q.elements(), q.scheme.bits, q.scheme.kind != QuantKind::nf4);

  int qmin = q.scheme.qmin(), qmax = q.scheme.qmax();
  for (std::size_t k = 0; k < q.codes.size(); ++k) {
    if (q.codes[k] < qmin || q.codes[k] > qmax) {
      throw IntegrityError("stored code " + std::to_string(q.codes[k]) + " at element " +
                           std::to_string(k) + " outside the " + q.scheme.name() + " range");
    }
  }
  return q;
}

FootprintReport footprint(const QuantizedTensor& q) {
  FootprintReport r;
  r.metadata_bytes = 4 + 1 + 1 + 4 + 4 + 1 + 4 + 4 + 1;
  r.codebook_bytes = q.scheme.kind == QuantKind::nf4 ? 16 * 8 : 0;
  std::size_t groups = q.group_count();
  if (q.double_quantized()) {
    r.constant_bytes = 4 + 8 * q.scale_chain->super_scales.size() + groups;
  } else {
    r.constant_bytes = 8 * groups;
  }
  if (q.scheme.kind == QuantKind::asymmetric) r.constant_bytes += groups;
  r.constant_bytes += groups;  // degenerate markers
  r.code_bytes = q.scheme.bits == 8 ? q.elements() : (q.elements() + 1) / 2;
  return r;
}

}  // namespace peftlab
