#include "fvt/rng.hpp"

#include <cmath>

namespace fvt {
inline namespace FVT_NS {

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    const double v = normal(0.0, 1.0);
    if (std::abs(v) <= 2.0) return v * stddev;
  }
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, bool requires_grad) {
  std::vector<real> d(shape_numel(shape));
  for (auto& v : d) v = static_cast<real>(uniform(lo, hi));
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

Tensor Rng::normal_tensor(Shape shape, double stddev, bool requires_grad) {
  std::vector<real> d(shape_numel(shape));
  for (auto& v : d) v = static_cast<real>(normal(0.0, stddev));
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

Tensor Rng::truncated_normal_tensor(Shape shape, double stddev, bool requires_grad) {
  std::vector<real> d(shape_numel(shape));
  for (auto& v : d) v = static_cast<real>(truncated_normal(stddev));
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

}  // namespace FVT_NS
}  // namespace fvt
