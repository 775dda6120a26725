#pragma once

#include <cstdint>
#include <random>

#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

// Seeded generator used for every random draw in the project.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent sub-seed for (seed, stream), e.g. per-sample generation.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Normal resampled until it falls within two standard deviations.
  double truncated_normal(double stddev);
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

  Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);
  Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);
  Tensor truncated_normal_tensor(Shape shape, double stddev, bool requires_grad = false);

 private:
  std::mt19937_64 engine_;
};

}  // namespace FVT_NS
}  // namespace fvt
