#pragma once

// Deterministic random source. All randomness in the library flows through
// this class so that a run is reproducible from a single seed. The uniform
// and normal transforms are written out here instead of using
// std::uniform_real_distribution / std::normal_distribution because the
// standard leaves their algorithms unspecified; mt19937_64 itself is fully
// pinned by the standard, so the combination is bit-stable across toolchains.

#include <cstdint>
#include <random>
#include <string_view>

namespace peftlab {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller. Draws come in pairs; the spare is cached.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n);

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi);

  // Derives a decorrelated seed for a named child stream. Different tags on
  // the same parent seed give independent streams; the same (seed, tag) pair
  // always gives the same stream.
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace peftlab
