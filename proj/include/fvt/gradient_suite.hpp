#pragma once

// Declares the suite for both precisions so that a 32-bit translation unit
// can call the 64-bit build. Include after any other fvt header.
#include <cstdint>
#include <string>
#include <vector>

#include "fvt/common.hpp"

namespace fvt {

struct GradientCheck {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t elements = 0;
  double max_rel_error = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
};

struct GradientSuiteOptions {
  std::uint64_t seed = 1;
  std::size_t n_seeds = 5;  // seeds seed, seed+1, ...
  double step = 1e-3;
  double tolerance = 1e-3;
};

struct GradientSuiteResult {
  std::vector<GradientCheck> checks;
  double worst = 0;
  std::string worst_name;
  double seconds = 0;
  double tolerance = 1e-3;

  bool passed() const { return worst < tolerance; }
};

namespace f32 {
GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& options);
}
namespace f64 {
GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& options);
}

}  // namespace fvt
