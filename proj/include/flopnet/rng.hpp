#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace flopnet {

// Deterministic scalar RNG. Gaussian sampling is done with an explicit
// Box-Muller transform instead of std::normal_distribution so that the
// stream depends only on the (fully specified) mt19937_64 engine and not
// on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, std) resampled until within [-2*std, 2*std].
  double trunc_normal(double std_dev) {
    for (;;) {
      const double x = normal();
      if (std::abs(x) <= 2.0) return x * std_dev;
    }
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(engine_() % static_cast<std::uint64_t>(n));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace flopnet
