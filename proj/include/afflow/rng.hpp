#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string_view>

namespace afflow {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based deterministic random stream. A stream is addressed by
/// (seed, purpose); draws are a pure function of (address, counter), so
/// independent streams never interact and results do not depend on how work
/// is scheduled across threads.
class Substream {
 public:
  Substream(std::uint64_t seed, std::string_view purpose)
      : base_(detail::splitmix64(seed ^ detail::fnv1a(purpose))) {}

  std::uint64_t next_u64() { return detail::splitmix64(base_ + counter_++); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Complex normal with E|z|^2 = 1.
  std::complex<double> cgaussian() {
    const double s = 1.0 / std::sqrt(2.0);
    return {gaussian() * s, gaussian() * s};
  }

  /// Child stream with an extra label; independent of the parent's counter.
  Substream fork(std::string_view label) const {
    Substream s(base_, label);
    return s;
  }

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace afflow
