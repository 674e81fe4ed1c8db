#include "peftlab/rng.hpp"

#include <cmath>
#include <numbers>

#include "peftlab/bytes.hpp"
#include "peftlab/errors.hpp"

namespace peftlab {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 must be strictly positive for the log; uniform() can return 0.
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw UsageError("Rng::below: n must be positive");
  // Reject the tail of the 64-bit range that would bias the modulus.
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x > limit);
  return x % n;
}

std::int64_t Rng::range(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) throw UsageError("Rng::range: lo must not exceed hi");
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(below(span));
}

std::uint64_t Rng::derive(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a(tag);
  ByteWriter w;
  w.u64(seed);
  h = fnv1a(w.view(), h);
  // A zero seed would collapse mt19937_64 to its default; nudge it.
  return h == 0 ? 0x9e3779b97f4a7c15ull : h;
}

}  // namespace peftlab
