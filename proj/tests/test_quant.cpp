#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "peftlab/quant.hpp"
#include "peftlab/rng.hpp"
#include "test_util.hpp"

using namespace peftlab;
using testutil::random_tensor;

namespace {

double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Independent inverse-CDF oracle: plain bisection against erfc, no shared
// code with the library's rational approximation.
double bisect_probit(double p) {
  double lo = -10.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (phi(mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::vector<Tensor> quant_fixtures(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  out.push_back(random_tensor(7, 13, rng, 3.0));
  out.push_back(random_tensor(4, 70, rng, 0.05));
  Tensor mixed(3, 64);
  for (std::size_t i = 0; i < mixed.rows(); ++i) {
    for (std::size_t j = 0; j < mixed.cols(); ++j) {
      // widely varying magnitude per row, including exact zeros
      double v = (j % 9 == 0) ? 0.0 : rng.normal() * std::pow(10.0, double(i) - 1.0);
      mixed.set(i, j, v);
    }
  }
  out.push_back(mixed);
  return out;
}

const std::vector<QuantScheme>& all_schemes() {
  static const std::vector<QuantScheme> s = {
      QuantScheme::asymmetric_affine(8), QuantScheme::asymmetric_affine(4),
      QuantScheme::symmetric_affine(8), QuantScheme::symmetric_affine(4),
      QuantScheme::nf4_scheme()};
  return s;
}

const std::vector<Granularity>& all_grans() {
  static const std::vector<Granularity> g = {Granularity::per_tensor(), Granularity::per_row(),
                                             Granularity::per_block(64),
                                             Granularity::per_block(7)};
  return g;
}

// Re-derives the flat range of a group the same way the header documents it.
std::pair<std::size_t, std::size_t> oracle_group_range(const QuantizedTensor& q, std::size_t g) {
  std::size_t n = q.elements();
  switch (q.granularity.kind) {
    case GranularityKind::per_tensor:
      return {0, n};
    case GranularityKind::per_row:
      return {g * q.cols, (g + 1) * q.cols};
    case GranularityKind::per_block:
      return {g * q.granularity.block_size,
              std::min(n, (g + 1) * q.granularity.block_size)};
  }
  return {0, 0};
}

}  // namespace

TEST_CASE("codebook has 8 negative, 1 zero, 7 positive strictly increasing values with unit endpoints") {
  const auto& cb = nf4_codebook();
  CHECK(cb.values[0] == -1.0);
  CHECK(cb.values[8] == 0.0);
  CHECK(cb.values[15] == 1.0);
  int neg = 0, zero = 0, pos = 0;
  for (double v : cb.values) {
    if (v < 0) ++neg;
    if (v == 0) ++zero;
    if (v > 0) ++pos;
  }
  CHECK(neg == 8);
  CHECK(zero == 1);
  CHECK(pos == 7);
  for (int i = 0; i + 1 < 16; ++i) CHECK(cb.values[i] < cb.values[i + 1]);
}

TEST_CASE("codebook values match an independent quantile oracle") {
  const auto& cb = nf4_codebook();
  constexpr double p0 = 1.0 / 32.0;
  double neg_anchor = -bisect_probit(p0);
  for (int i = 0; i < 8; ++i) {
    double p = p0 + i * (0.5 - p0) / 8.0;
    CHECK(cb.values[i] == doctest::Approx(bisect_probit(p) / neg_anchor).epsilon(1e-12));
  }
  double pos_anchor = bisect_probit(1.0 - p0);
  for (int j = 1; j <= 7; ++j) {
    double p = 0.5 + j * (0.5 - p0) / 7.0;
    CHECK(cb.values[8 + j] == doctest::Approx(bisect_probit(p) / pos_anchor).epsilon(1e-12));
  }
}

TEST_CASE("round to nearest even at the halfway points") {
  CHECK(detail::rne(0.5) == 0.0);
  CHECK(detail::rne(1.5) == 2.0);
  CHECK(detail::rne(2.5) == 2.0);
  CHECK(detail::rne(3.5) == 4.0);
  CHECK(detail::rne(-0.5) == 0.0);
  CHECK(detail::rne(-2.5) == -2.0);
  CHECK(detail::rne(0.49) == 0.0);
  CHECK(detail::rne(0.51) == 1.0);
}

TEST_CASE("asymmetric fit on [0, 2.54] gives the expected scale and zero point") {
  std::vector<double> vals = {0.0, 1.0, 2.54, 0.3};
  QuantConstants c = fit_constants(vals, QuantScheme::asymmetric_affine(8));
  CHECK(c.scale == 2.54 / 255.0);
  CHECK(c.zero_point == -128);
  CHECK_FALSE(c.degenerate);

  // One-sided negative data: range is zero-extended so Z stays in range.
  std::vector<double> neg = {-4.0, -1.0, -2.2};
  QuantConstants cn = fit_constants(neg, QuantScheme::asymmetric_affine(8));
  CHECK(cn.scale == 4.0 / 255.0);
  CHECK(cn.zero_point == 127);
  // zero must be exactly representable: S * (code(0) - Z) == 0
  CHECK(cn.scale * (127.0 - cn.zero_point) == 0.0);
}

TEST_CASE("symmetric fit excludes the most negative code and anchors zero") {
  QuantScheme s8 = QuantScheme::symmetric_affine(8);
  CHECK(s8.qmin() == -127);
  CHECK(s8.qmax() == 127);
  std::vector<double> vals = {-1.0, 0.5, 1.0};
  QuantConstants c = fit_constants(vals, s8);
  CHECK(c.scale == 1.0 / 127.0);
  CHECK(c.zero_point == 0);

  Tensor t = Tensor::from_data(1, 3, {-1.0, 0.5, 1.0});
  QuantizedTensor q = quantize(t, s8, Granularity::per_tensor(), false);
  CHECK(q.codes[0] == -127);
  CHECK(q.codes[1] == 64);  // 63.5 rounds to even
  CHECK(q.codes[2] == 127);
}

TEST_CASE("quantizing exact zero is lossless for every scheme") {
  for (const auto& scheme : all_schemes()) {
    Tensor t = Tensor::from_data(1, 4, {0.0, 0.37, -0.9, 0.0});
    QuantizedTensor q = quantize(t, scheme, Granularity::per_tensor(), false);
    Tensor back = dequantize(q);
    CHECK(back.at(0, 0) == 0.0);
    CHECK(back.at(0, 3) == 0.0);
  }
}

TEST_CASE("an all-zero group is flagged degenerate and reconstructs to zeros") {
  Tensor t = Tensor::zeros(2, 5);
  for (const auto& scheme : all_schemes()) {
    QuantizedTensor q = quantize(t, scheme, Granularity::per_row(), false);
    REQUIRE(q.group_count() == 2);
    for (const auto& c : q.constants) {
      CHECK(c.degenerate);
      CHECK(c.scale == 1.0);
      CHECK(c.zero_point == 0);
    }
    Tensor back = dequantize(q);
    for (double v : back.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("codebook ties resolve to the smaller magnitude value") {
  const auto& cb = nf4_codebook();
  // Exactly halfway between 0 and the first positive value.
  double mid = cb.values[9] / 2.0;
  CHECK(cb.nearest(mid) == 8);
  // Halfway between the two most negative values: prefer the one nearer zero.
  double negmid = (cb.values[0] + cb.values[1]) / 2.0;
  int got = cb.nearest(negmid);
  bool equidistant = (negmid - cb.values[0]) == (cb.values[1] - negmid);
  if (equidistant) {
    CHECK(got == 1);
  } else {
    CHECK((got == 0 || got == 1));
  }
  CHECK(cb.nearest(-5.0) == 0);
  CHECK(cb.nearest(5.0) == 15);
}

TEST_CASE("round-trip error is bounded by half a step for affine and half the widest gap for nf4") {
  for (std::uint64_t seed : {21ull, 22ull, 23ull}) {
    for (const Tensor& t : quant_fixtures(seed)) {
      for (const auto& scheme : all_schemes()) {
        for (const auto& gran : all_grans()) {
          QuantizedTensor q = quantize(t, scheme, gran, false);
          Tensor back = dequantize(q);
          for (std::size_t g = 0; g < q.group_count(); ++g) {
            auto [begin, end] = oracle_group_range(q, g);
            // Refit independently from raw values; stored constants must match.
            QuantConstants ref =
                fit_constants(std::span<const double>(t.data().data() + begin, end - begin),
                              scheme);
            CHECK(q.constants[g].scale == ref.scale);
            CHECK(q.constants[g].zero_point == ref.zero_point);
            double bound =
                scheme.kind == QuantKind::nf4
                    ? ref.scale * nf4_codebook().max_half_gap()
                    : ref.scale / 2.0;
            for (std::size_t k = begin; k < end; ++k) {
              double err = std::fabs(t.data()[k] - back.data()[k]);
              CHECK(err <= bound * (1.0 + 1e-9) + 1e-15);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("values already on the quantization grid reproduce bitwise") {
  // Symmetric: grid points are S * code.
  double s = 0.013;
  std::vector<double> vals;
  for (int code : {-127, -64, -1, 0, 1, 77, 127}) vals.push_back(s * code);
  // absmax = s*127 so the fitted scale is (s*127)/127; half-ulp effects are
  // absorbed because rne lands on the same integer.
  Tensor t = Tensor::from_data(1, vals.size(), vals);
  QuantizedTensor q = quantize(t, QuantScheme::symmetric_affine(8), Granularity::per_tensor(),
                               false);
  Tensor back = dequantize(q);
  for (std::size_t k = 0; k < vals.size(); ++k) {
    CHECK(back.data()[k] == doctest::Approx(vals[k]).epsilon(1e-14));
  }

  // Codebook grid: S * cb[i] reproduces exactly, including the unit endpoints.
  const auto& cb = nf4_codebook();
  double s2 = 0.75;  // exact in binary so S*cb[i] recomputes bitwise
  std::vector<double> nv;
  for (int i = 0; i < 16; ++i) nv.push_back(s2 * cb.values[i]);
  Tensor t2 = Tensor::from_data(4, 4, nv);
  QuantizedTensor q2 = quantize(t2, QuantScheme::nf4_scheme(), Granularity::per_tensor(), false);
  Tensor back2 = dequantize(q2);
  for (std::size_t k = 0; k < nv.size(); ++k) CHECK(back2.data()[k] == nv[k]);
}

TEST_CASE("granularity controls the number of fitted groups") {
  Rng rng(5);
  Tensor t = random_tensor(3, 50, rng);
  CHECK(quantize(t, QuantScheme::symmetric_affine(8), Granularity::per_tensor(), false)
            .group_count() == 1);
  CHECK(quantize(t, QuantScheme::symmetric_affine(8), Granularity::per_row(), false)
            .group_count() == 3);
  // 150 elements in blocks of 64: two full blocks and one of 22.
  QuantizedTensor qb = quantize(t, QuantScheme::symmetric_affine(8), Granularity::per_block(64),
                                false);
  CHECK(qb.group_count() == 3);
  CHECK(qb.group_of(0) == 0);
  CHECK(qb.group_of(63) == 0);
  CHECK(qb.group_of(64) == 1);
  CHECK(qb.group_of(149) == 2);

  // Per-row scales isolate rows with wildly different magnitude.
  Tensor rowy(2, 4);
  for (std::size_t j = 0; j < 4; ++j) {
    rowy.set(0, j, 1e-3 * (j + 1.0));
    rowy.set(1, j, 1e3 * (j + 1.0));
  }
  QuantizedTensor qr = quantize(rowy, QuantScheme::symmetric_affine(8), Granularity::per_row(),
                                false);
  Tensor br = dequantize(qr);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(std::fabs(br.at(0, j) - rowy.at(0, j)) <= qr.constants[0].scale / 2 * 1.000001);
    CHECK(std::fabs(br.at(1, j) - rowy.at(1, j)) <= qr.constants[1].scale / 2 * 1.000001);
  }
}

TEST_CASE("double quantization reconstructs equal scales exactly and bounds unequal ones") {
  // 1024 equal scales: reconstruction must be bit-exact.
  std::vector<QuantConstants> eq(1024);
  for (auto& c : eq) c.scale = 0.1;  // deliberately not a power of two
  ScaleChain ch = build_scale_chain(eq);
  CHECK(ch.super_scales.size() == 4);
  for (std::size_t g = 0; g < eq.size(); ++g) CHECK(ch.reconstruct(g) == 0.1);

  // Mixed scales: symmetric int8 over the super-group absmax.
  Rng rng(17);
  std::vector<QuantConstants> mixed(300);
  for (auto& c : mixed) c.scale = 0.05 + 0.95 * rng.uniform();
  ScaleChain ch2 = build_scale_chain(mixed);
  REQUIRE(ch2.super_scales.size() == 2);
  for (std::size_t g = 0; g < mixed.size(); ++g) {
    double super = ch2.super_scales[g / ScaleChain::kSuperGroup];
    CHECK(std::fabs(ch2.reconstruct(g) - mixed[g].scale) <= super / 254.0 * 1.000001);
    CHECK(ch2.codes[g] >= 0);
    CHECK(ch2.codes[g] <= 127);
  }
}

TEST_CASE("double quantization is the default for nf4 only") {
  Rng rng(9);
  Tensor t = random_tensor(16, 16, rng);
  CHECK(quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(64)).double_quantized());
  CHECK_FALSE(
      quantize(t, QuantScheme::asymmetric_affine(8), Granularity::per_block(64)).double_quantized());
  CHECK_FALSE(quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(64), false)
                  .double_quantized());
}

TEST_CASE("round-trip under double quantization stays within the widened bound") {
  for (std::uint64_t seed : {31ull, 32ull}) {
    for (const Tensor& t : quant_fixtures(seed)) {
      for (const auto& scheme : all_schemes()) {
        QuantizedTensor q = quantize(t, scheme, Granularity::per_block(16), true);
        REQUIRE(q.double_quantized());
        Tensor back = dequantize(q);
        for (std::size_t g = 0; g < q.group_count(); ++g) {
          auto [begin, end] = oracle_group_range(q, g);
          QuantConstants ref = fit_constants(
              std::span<const double>(t.data().data() + begin, end - begin), scheme);
          double super = q.scale_chain->super_scales[g / ScaleChain::kSuperGroup];
          double scale_err = super / 254.0 * 1.000001;  // half step of the scale's own grid
          double base_bound, amp;
          if (scheme.kind == QuantKind::nf4) {
            base_bound = ref.scale * nf4_codebook().max_half_gap();
            amp = 1.0;  // |codebook value| <= 1
          } else {
            base_bound = ref.scale / 2.0;
            amp = static_cast<double>(scheme.qmax() - scheme.qmin());
          }
          for (std::size_t k = begin; k < end; ++k) {
            double err = std::fabs(t.data()[k] - back.data()[k]);
            CHECK(err <= base_bound * (1 + 1e-9) + scale_err * amp + 1e-15);
          }
        }
      }
    }
  }
}

TEST_CASE("pack and unpack 4-bit codes across the full signed and unsigned ranges") {
  std::vector<std::int8_t> signed_codes;
  for (int v = -8; v <= 7; ++v) signed_codes.push_back(static_cast<std::int8_t>(v));
  signed_codes.push_back(3);  // odd count exercises the trailing half byte
  auto packed = pack_codes(signed_codes, 4);
  CHECK(packed.size() == 9);
  auto un = unpack_codes(packed, signed_codes.size(), 4, true);
  CHECK(un == signed_codes);

  std::vector<std::int8_t> idx_codes;
  for (int v = 0; v <= 15; ++v) idx_codes.push_back(static_cast<std::int8_t>(v));
  auto packed2 = pack_codes(idx_codes, 4);
  auto un2 = unpack_codes(packed2, idx_codes.size(), 4, false);
  CHECK(un2 == idx_codes);
}

TEST_CASE("serialization round-trips bit-exactly for every scheme, granularity, and flag") {
  for (const Tensor& t : quant_fixtures(41)) {
    for (const auto& scheme : all_schemes()) {
      for (const auto& gran : all_grans()) {
        for (bool dq : {false, true}) {
          QuantizedTensor q = quantize(t, scheme, gran, dq);
          auto bytes = serialize(q);
          QuantizedTensor q2 = deserialize_quantized(bytes);
          auto bytes2 = serialize(q2);
          REQUIRE(bytes2 == bytes);
          CHECK(q2.codes == q.codes);
          REQUIRE(q2.group_count() == q.group_count());
          for (std::size_t g = 0; g < q.group_count(); ++g) {
            CHECK(q2.constants[g].scale == q.constants[g].scale);
            CHECK(q2.constants[g].zero_point == q.constants[g].zero_point);
            CHECK(q2.constants[g].degenerate == q.constants[g].degenerate);
          }
          // Dequantized values identical through the byte round trip.
          Tensor a = dequantize(q), b = dequantize(q2);
          for (std::size_t k = 0; k < a.size(); ++k) CHECK(a.data()[k] == b.data()[k]);
        }
      }
    }
  }
}

TEST_CASE("every truncation of a serialized stream fails cleanly") {
  Rng rng(55);
  Tensor t = random_tensor(6, 21, rng);
  QuantizedTensor q = quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(16), true);
  auto bytes = serialize(q);
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    auto part = std::span<const std::uint8_t>(bytes.data(), cut);
    CHECK_THROWS_AS(deserialize_quantized(part), FormatError);
  }
  // Trailing garbage is also rejected.
  auto extended = bytes;
  extended.push_back(0);
  CHECK_THROWS_AS(deserialize_quantized(extended), FormatError);
}

TEST_CASE("corrupt streams are rejected with the right error kind") {
  Rng rng(56);
  Tensor t = random_tensor(4, 8, rng);
  QuantizedTensor q = quantize(t, QuantScheme::symmetric_affine(8), Granularity::per_tensor(),
                               false);
  auto bytes = serialize(q);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_quantized(bad_magic), FormatError);

  auto bad_kind = bytes;
  bad_kind[4] = 9;
  CHECK_THROWS_AS(deserialize_quantized(bad_kind), FormatError);

  // Symmetric int8 excludes -128; patch a packed code byte to 0x80.
  auto bad_code = bytes;
  bad_code[bad_code.size() - 1] = 0x80;
  CHECK_THROWS_AS(deserialize_quantized(bad_code), IntegrityError);

  // Same probe at 4 bits: nibble 0x8 is -8, outside symmetric int4.
  QuantizedTensor q4 = quantize(t, QuantScheme::symmetric_affine(4), Granularity::per_tensor(),
                                false);
  auto bytes4 = serialize(q4);
  bytes4[bytes4.size() - 1] = 0x88;
  CHECK_THROWS_AS(deserialize_quantized(bytes4), IntegrityError);
}

TEST_CASE("the footprint report matches the serialized length component by component") {
  for (const Tensor& t : quant_fixtures(67)) {
    for (const auto& scheme : all_schemes()) {
      for (const auto& gran : all_grans()) {
        for (bool dq : {false, true}) {
          QuantizedTensor q = quantize(t, scheme, gran, dq);
          FootprintReport r = footprint(q);
          CHECK(r.total() == serialize(q).size());
          CHECK(r.codebook_bytes == (scheme.kind == QuantKind::nf4 ? 128 : 0));
          std::size_t expect_codes =
              scheme.bits == 8 ? q.elements() : (q.elements() + 1) / 2;
          CHECK(r.code_bytes == expect_codes);
        }
      }
    }
  }
}

TEST_CASE("storing scales as int8 shrinks constant storage by roughly 8x") {
  // 65536 elements in blocks of 64: exactly 1024 groups, 4 super-groups.
  Rng rng(73);
  Tensor t = random_tensor(256, 256, rng);
  QuantizedTensor plain = quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(64),
                                   false);
  QuantizedTensor dq = quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(64), true);
  FootprintReport fp = footprint(plain), fd = footprint(dq);
  // 1024 f64 scales vs 1024 int8 codes + 4 super-scales + count field.
  CHECK(fp.constant_bytes == 8 * 1024 + 1024);
  CHECK(fd.constant_bytes == 4 + 8 * 4 + 1024 + 1024);
}

TEST_CASE("quantized footprints undercut a 16-bit dense baseline by the expected margins") {
  Rng rng(91);
  Tensor t = random_tensor(1000, 1000, rng, 0.5);
  std::size_t baseline = plain_footprint_bytes(t.size(), 2);

  QuantizedTensor q8 = quantize(t, QuantScheme::asymmetric_affine(8), Granularity::per_block(64),
                                false);
  double red8 = 1.0 - double(footprint(q8).total()) / double(baseline);
  CHECK(red8 >= 0.35);
  CHECK(red8 <= 0.55);

  QuantizedTensor q4 = quantize(t, QuantScheme::nf4_scheme(), Granularity::per_block(64), true);
  double red4 = 1.0 - double(footprint(q4).total()) / double(baseline);
  CHECK(red4 >= 0.60);

  QuantizedTensor s4 = quantize(t, QuantScheme::symmetric_affine(4), Granularity::per_block(64),
                                false);
  double redS4 = 1.0 - double(footprint(s4).total()) / double(baseline);
  CHECK(redS4 >= 0.60);
}

TEST_CASE("scheme and granularity parsing round trip and reject junk") {
  for (const auto& scheme : all_schemes()) {
    QuantScheme parsed = parse_scheme(scheme.name());
    CHECK(parsed.kind == scheme.kind);
    CHECK(parsed.bits == scheme.bits);
  }
  CHECK_THROWS_AS(parse_scheme("int7"), ConfigError);
  CHECK_THROWS_AS(parse_granularity("per-banana"), ConfigError);
  QuantScheme bad{QuantKind::symmetric, 3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  Granularity gb = Granularity::per_block(0);
  CHECK_THROWS_AS(gb.validate(), ConfigError);
}
