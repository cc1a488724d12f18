#pragma once

#include <cstdint>
#include <random>

#include "mfil/tensor.hpp"

namespace mfil {

/// Seeded generator. All stochastic choices in the library draw from one of these,
/// so a (seed, call sequence) pair reproduces bit-identical values.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return mean + stddev * std::normal_distribution<double>(0.0, 1.0)(engine_);
  }
  /// Normal resampled until it lands within two standard deviations.
  double trunc_normal(double stddev) {
    for (;;) {
      double v = normal();
      if (v >= -2.0 && v <= 2.0) return v * stddev;
    }
  }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_));
  }
  std::mt19937_64& engine() { return engine_; }

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }
  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace mfil
